"""End-to-end optimization: batching, matching, loss, AdamW, logging, checkpoints.

Each batch runs a tape-recorded forward pass, builds cost matrices from the
detached slot values (matching never records tape nodes), solves the
assignment per image, evaluates the Hungarian loss at that fixed assignment,
and applies a clipped AdamW update with separate backbone/transformer
learning rates. Epoch-level randomness (shuffle, dropout) derives from
(seed, stream, epoch), so runs are reproducible and resumable.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint, matching, metrics, model
from .config import OptimConfig, RunConfig, ScheduleConfig, dump_config, validate_for_training
from .data import Batch, Dataset, batch_iter, filter_for_training, load_dataset_cache, synth_generate
from .loss import LossBreakdown, LossWeights, hungarian_loss, hungarian_loss_graph
from .model import ModelConfig
from .pose import decode_pose

log = logging.getLogger("poet.training")

_SHUFFLE_STREAM = 101
_DROPOUT_STREAM = 202


class TrainBatchError(RuntimeError):
    """A batch failed; the message carries the epoch/batch position."""


@dataclass
class OptimState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int
    config: OptimConfig


def init_optim_state(params: dict[str, np.ndarray], config: OptimConfig) -> OptimState:
    return OptimState(
        m={name: np.zeros_like(p) for name, p in params.items()},
        v={name: np.zeros_like(p) for name, p in params.items()},
        step=0,
        config=config,
    )


def _decayed(name: str) -> bool:
    return not (name.endswith("bias") or name.endswith("gain"))


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimState,
    lr_transformer: float | None = None,
    lr_backbone: float | None = None,
) -> dict[str, np.ndarray]:
    """In-place AdamW update with bias correction and decoupled weight decay.

    Weight decay multiplies into the pre-update parameter and skips biases and
    norm gains; parameters named backbone.* use the backbone learning rate.
    """
    cfg = state.config
    lr_t = cfg.lr_transformer if lr_transformer is None else lr_transformer
    lr_b = cfg.lr_backbone if lr_backbone is None else lr_backbone
    state.step += 1
    b1c = 1.0 - cfg.beta1**state.step
    b2c = 1.0 - cfg.beta2**state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ad.ShapeMismatch(f"{name}: gradient shape {g.shape} vs parameter shape {p.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        lr = lr_b if name.startswith("backbone.") else lr_t
        update = lr * (m / b1c) / (np.sqrt(v / b2c) + cfg.eps)
        if cfg.weight_decay and _decayed(name):
            update = update + lr * cfg.weight_decay * p
        p -= update
    return params


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients so the global L2 norm is at most max_norm."""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm <= 0 or total <= max_norm:
        return grads, total
    scale = max_norm / total
    return {name: g * scale for name, g in grads.items()}, total


def effective_lr(base: float, schedule: ScheduleConfig, epoch: int) -> float:
    """Learning rate at a 1-indexed epoch; each passed drop divides by the factor."""
    lr = base
    for drop in schedule.drop_epochs:
        if epoch > drop:
            lr = lr / schedule.drop_factor
    return lr


# ---------------------------------------------------------------------------
# epoch loops


def _batch_assignments(batch: Batch, pred_sets, weights: LossWeights):
    return [
        matching.hungarian_assign(matching.build_cost_matrix(targets, preds, weights))
        for targets, preds in zip(batch.targets, pred_sets)
    ]


def train_epoch(
    params: dict[str, np.ndarray],
    optim: OptimState,
    dataset: Dataset,
    run: RunConfig,
    epoch: int,
) -> LossBreakdown:
    """One pass over the dataset; returns the mean per-batch loss breakdown."""
    cfg = run.model
    dropout_rng = np.random.default_rng([run.seed, _DROPOUT_STREAM, epoch])
    lr_t = effective_lr(run.optim.lr_transformer, run.schedule, epoch)
    lr_b = effective_lr(run.optim.lr_backbone, run.schedule, epoch)
    accum = LossBreakdown.build(0.0, 0.0, 0.0, 0.0)
    batches = 0
    for bi, batch in enumerate(batch_iter(dataset, run.train.batch_size, [run.seed, _SHUFFLE_STREAM, epoch], cfg.num_queries)):
        try:
            tape = ad.Tape()
            watched = model.watch_params(tape, params)
            outputs, _ = model.model_forward(ad.Tensor(batch.images), watched, cfg, train=True, rng=dropout_rng)
            nodes_before = len(tape)
            pred_sets = model.slots_from_outputs(outputs, cfg)
            assignments = _batch_assignments(batch, pred_sets, run.loss)
            if len(tape) != nodes_before:
                raise RuntimeError("matching must not record tape nodes")
            total, breakdown = hungarian_loss_graph(batch.targets, outputs, assignments, run.loss, batch.num_humans)
            grads = ad.backward(total)
            grad_arrays = {name: grads.wrt(t) for name, t in watched.items()}
            if run.optim.clip_norm > 0:
                grad_arrays, _ = clip_gradients(grad_arrays, run.optim.clip_norm)
            adamw_step(params, grad_arrays, optim, lr_transformer=lr_t, lr_backbone=lr_b)
        except (matching.NonFiniteEntry, matching.SizeMismatch, ad.ShapeMismatch, ValueError) as e:
            raise TrainBatchError(f"epoch {epoch} batch {bi}: {e}") from e
        accum = accum.plus(breakdown)
        batches += 1
    if batches == 0:
        raise TrainBatchError(f"epoch {epoch}: dataset produced no batches")
    return accum.scaled(1.0 / batches)


def dataset_loss(params: dict[str, np.ndarray], dataset: Dataset, run: RunConfig) -> LossBreakdown:
    """Eval-mode Hungarian loss over a dataset (no dropout, no updates)."""
    cfg = run.model
    cparams = model.constant_params(params)
    accum = LossBreakdown.build(0.0, 0.0, 0.0, 0.0)
    batches = 0
    for batch in batch_iter(dataset, run.train.batch_size, None, cfg.num_queries):
        outputs, _ = model.model_forward(ad.Tensor(batch.images), cparams, cfg, train=False)
        pred_sets = model.slots_from_outputs(outputs, cfg)
        assignments = _batch_assignments(batch, pred_sets, run.loss)
        per_image = [
            hungarian_loss(t, p, a, run.loss, batch.num_humans, num_images_in_batch=len(batch.targets))
            for t, p, a in zip(batch.targets, pred_sets, assignments)
        ]
        batch_breakdown = per_image[0]
        for extra in per_image[1:]:
            batch_breakdown = batch_breakdown.plus(extra)
        accum = accum.plus(batch_breakdown)
        batches += 1
    return accum.scaled(1.0 / max(batches, 1))


# ---------------------------------------------------------------------------
# evaluation


def _sample_size(dataset: Dataset, index: int) -> tuple[float, float]:
    anns = dataset.samples[index].annotations
    return anns[0].image_size if anns else dataset.image_size


def ground_truths(dataset: Dataset) -> list[list[metrics.GroundTruthInstance]]:
    out = []
    for sample in dataset.samples:
        instances = []
        for j, ann in enumerate(sample.annotations):
            pts = np.array([(kp.x, kp.y) for kp in ann.keypoints])
            vis = np.array([kp.v for kp in ann.keypoints], dtype=float)
            area = sample.areas[j] if sample.areas is not None else None
            instances.append(metrics.GroundTruthInstance(pts, vis, area))
        out.append(instances)
    return out


def detections_from_slots(pred_set, image_size, score_threshold: float, top_k: int) -> list[metrics.Detection]:
    """Keep slots by score threshold (or the top-k highest scoring) and decode to pixels."""
    slots = list(pred_set)
    if top_k > 0:
        order = sorted(range(len(slots)), key=lambda j: (-slots[j].score, j))[:top_k]
        chosen = [slots[j] for j in order]
    else:
        chosen = [s for s in slots if s.score >= score_threshold]
    dets = []
    for slot in chosen:
        kps = decode_pose(slot.pose, image_size)
        dets.append(metrics.Detection([(kp.x, kp.y) for kp in kps], slot.score))
    return dets


def default_oks_params(num_keypoints: int) -> metrics.OksParams:
    return metrics.OksParams.coco17() if num_keypoints == 17 else metrics.OksParams.uniform(num_keypoints)


def evaluate(
    params: dict[str, np.ndarray],
    cfg: ModelConfig,
    dataset: Dataset,
    score_threshold: float = 0.5,
    top_k: int = 0,
    oks_params: metrics.OksParams | None = None,
    batch_size: int = 32,
) -> tuple[metrics.EvalResult, list[metrics.EvalResult]]:
    """Score the model on a dataset; returns (final result, one result per decoder layer)."""
    oks_params = oks_params or default_oks_params(cfg.num_keypoints)
    cparams = model.constant_params(params)
    per_layer: list[list[list[metrics.Detection]]] = [[] for _ in range(cfg.dec_layers)]
    for batch in batch_iter(dataset, batch_size, None, cfg.num_queries):
        _, states = model.model_forward(ad.Tensor(batch.images), cparams, cfg, train=False)
        for li, state in enumerate(states):
            outputs = model.head_forward(state, cparams, cfg)
            for b, pred_set in enumerate(model.slots_from_outputs(outputs, cfg)):
                size = _sample_size(dataset, batch.indices[b])
                per_layer[li].append(detections_from_slots(pred_set, size, score_threshold, top_k))
    gts = ground_truths(dataset)
    results = [metrics.evaluate_detections(dets, gts, oks_params) for dets in per_layer]
    return results[-1], results


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str, params: dict[str, np.ndarray], optim: OptimState, epoch: int) -> None:
    arrays: dict[str, np.ndarray] = dict(params)
    for name, arr in optim.m.items():
        arrays[f"optim.m.{name}"] = arr
    for name, arr in optim.v.items():
        arrays[f"optim.v.{name}"] = arr
    arrays["meta.step"] = np.array([float(optim.step)])
    arrays["meta.epoch"] = np.array([float(epoch)])
    checkpoint.save_arrays(path, arrays)


def load_checkpoint(path: str, optim_config: OptimConfig) -> tuple[dict[str, np.ndarray], OptimState, int]:
    arrays = checkpoint.load_arrays(path)
    params: dict[str, np.ndarray] = {}
    m: dict[str, np.ndarray] = {}
    v: dict[str, np.ndarray] = {}
    step = 0
    epoch = 0
    for name, arr in arrays.items():
        if name == "meta.step":
            step = int(arr[0])
        elif name == "meta.epoch":
            epoch = int(arr[0])
        elif name.startswith("optim.m."):
            m[name[len("optim.m.") :]] = arr
        elif name.startswith("optim.v."):
            v[name[len("optim.v.") :]] = arr
        else:
            params[name] = arr
    return params, OptimState(m, v, step, optim_config), epoch


# ---------------------------------------------------------------------------
# full run


def resolve_dataset(spec: str, run: RunConfig, role: str) -> Dataset | None:
    if spec == "none":
        return None
    if spec == "synth":
        cfg = run.synth
        if role == "val":
            cfg = replace(cfg, num_samples=run.train.val_samples, seed=cfg.seed + 1)
        return synth_generate(cfg)
    return load_dataset_cache(spec)


def _format_row(values) -> str:
    return ",".join("" if v is None else (repr(float(v)) if isinstance(v, float) else str(v)) for v in values)


LOSS_HEADER = "epoch,split,class,keypoint,visibility,center,total"
MAP_HEADER = "epoch,ap,ap50,ap75,ap_m,ap_l,ar,ar50,ar75,ar_m,ar_l"
PER_LAYER_HEADER = "epoch,layer,ap,ap50,ap75,ap_m,ap_l,ar,ar50,ar75,ar_m,ar_l"


def _loss_row(epoch: int, split: str, b: LossBreakdown) -> str:
    return _format_row((epoch, split, b.class_nll, b.keypoint_l1, b.visibility_l2, b.center_l2, b.total))


def train_run(run: RunConfig, out_dir: str, resume: str | None = None) -> dict:
    """Train per the run config, logging CSV curves and checkpoints under out_dir.

    Checkpoints land every train.checkpoint_every epochs, at each learning
    rate drop, and at the end (checkpoint_final.bin). Resume restarts after
    the checkpoint's epoch and reproduces the unresumed run exactly, since all
    per-epoch randomness is derived from (seed, epoch).
    """
    validate_for_training(run)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    train_ds = resolve_dataset(run.train.dataset, run, "train")
    if train_ds is None:
        raise ValueError("training needs a dataset (train.dataset must not be 'none')")
    train_ds, dropped_empty, dropped_overfull = filter_for_training(train_ds, run.model.num_queries)
    if len(train_ds) == 0:
        raise ValueError("no trainable samples after filtering")
    val_ds = resolve_dataset(run.train.val_dataset, run, "val")

    if resume:
        params, optim, start_epoch = load_checkpoint(resume, run.optim)
        log.info("resumed from %s at epoch %d", resume, start_epoch)
        mode = "a"
    else:
        params = model.init_params(run.model, run.seed)
        optim = init_optim_state(params, run.optim)
        start_epoch = 0
        mode = "w"

    losses_path = out / "losses.csv"
    map_path = out / "map.csv"
    per_layer_path = out / "per_layer_map.csv"
    losses_fh = open(losses_path, mode, encoding="utf-8")
    map_fh = open(map_path, mode, encoding="utf-8") if val_ds is not None else None
    layer_fh = open(per_layer_path, mode, encoding="utf-8") if val_ds is not None else None
    if mode == "w":
        print(LOSS_HEADER, file=losses_fh)
        if map_fh:
            print(MAP_HEADER, file=map_fh)
        if layer_fh:
            print(PER_LAYER_HEADER, file=layer_fh)

    def save_with_config(path: str, epoch: int) -> None:
        save_checkpoint(path, params, optim, epoch)
        Path(path + ".cfg").write_text(dump_config(run), encoding="utf-8")

    drop_set = set(run.schedule.drop_epochs)
    last_eval = None
    try:
        for epoch in range(start_epoch + 1, run.schedule.epochs + 1):
            breakdown = train_epoch(params, optim, train_ds, run, epoch)
            print(_loss_row(epoch, "train", breakdown), file=losses_fh)
            should_eval = val_ds is not None and run.train.eval_every > 0 and (
                epoch % run.train.eval_every == 0 or epoch == run.schedule.epochs
            )
            if should_eval:
                val_breakdown = dataset_loss(params, val_ds, run)
                print(_loss_row(epoch, "val", val_breakdown), file=losses_fh)
                final, per_layer = evaluate(
                    params, run.model, val_ds, run.train.score_threshold, run.train.top_k,
                    batch_size=run.train.batch_size,
                )
                last_eval = final
                print(_format_row((epoch, *final.as_dict().values())), file=map_fh)
                for li, res in enumerate(per_layer):
                    print(_format_row((epoch, li, *res.as_dict().values())), file=layer_fh)
                map_fh.flush()
                layer_fh.flush()
            losses_fh.flush()
            if run.train.checkpoint_every > 0 and (epoch % run.train.checkpoint_every == 0 or epoch in drop_set):
                save_with_config(str(out / f"checkpoint_epoch{epoch:04d}.bin"), epoch)
            log.info("epoch %d: train total %.6f", epoch, breakdown.total)
        save_with_config(str(out / "checkpoint_final.bin"), run.schedule.epochs)
    finally:
        losses_fh.close()
        if map_fh:
            map_fh.close()
        if layer_fh:
            layer_fh.close()
    return {
        "params": params,
        "optim": optim,
        "final_eval": last_eval,
        "dropped_empty": dropped_empty,
        "dropped_overfull": dropped_overfull,
    }
