"""Keypoint-similarity scoring and average precision/recall evaluation.

OKS is an exponential of squared keypoint distances normalized by object
scale and per-keypoint constants, averaged over ground-truth-visible
keypoints. Detections are greedily matched per image in descending score
order at each OKS threshold; precision-recall curves accumulate across
images and are summarized by 101-point interpolated AP and final recall,
swept over thresholds 0.50:0.05:0.95 and the medium/large size buckets.

Instances are bucketed by ground-truth area: the provided annotation area
when available, otherwise the tight bounding box of visible keypoints (sides
floored at one pixel). Fields with no ground truth to score stay undefined
(None), never zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from .pose import PoseClass, decode_pose, from_flat

DEFAULT_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))
MEDIUM_RANGE = (32.0**2, 96.0**2)
LARGE_RANGE = (96.0**2, float("inf"))

# Per-keypoint labeling-uncertainty constants for the 17-keypoint person layout,
# as distributed with the standard COCO evaluation toolkit (k_i = 2 * sigma_i).
COCO_K17 = tuple(
    2.0 * s
    for s in (
        0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072,
        0.062, 0.062, 0.107, 0.107, 0.087, 0.087, 0.089, 0.089,
    )
)


class NoVisibleKeypoints(ValueError):
    """OKS is undefined for a ground truth without visible keypoints."""


@dataclass(frozen=True)
class OksParams:
    k: tuple[float, ...]

    def __init__(self, k: Sequence[float]):
        k = tuple(float(x) for x in k)
        if any(x <= 0 for x in k):
            raise ValueError("all OKS constants must be > 0")
        object.__setattr__(self, "k", k)

    @staticmethod
    def coco17() -> "OksParams":
        return OksParams(COCO_K17)

    @staticmethod
    def uniform(num_keypoints: int, value: float = 0.1) -> "OksParams":
        return OksParams((value,) * num_keypoints)


@dataclass(frozen=True)
class Detection:
    keypoints: np.ndarray  # (K, 2) pixels
    score: float

    def __init__(self, keypoints, score):
        object.__setattr__(self, "keypoints", np.asarray(keypoints, dtype=np.float64).reshape(-1, 2))
        object.__setattr__(self, "score", float(score))


@dataclass(frozen=True)
class GroundTruthInstance:
    keypoints: np.ndarray  # (K, 2) pixels
    visibility: np.ndarray  # (K,) flags, >0 means labeled
    area: float | None = None

    def __init__(self, keypoints, visibility, area=None):
        object.__setattr__(self, "keypoints", np.asarray(keypoints, dtype=np.float64).reshape(-1, 2))
        object.__setattr__(self, "visibility", np.asarray(visibility, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "area", None if area is None else float(area))

    @property
    def num_visible(self) -> int:
        return int((self.visibility > 0).sum())

    def effective_area(self) -> float:
        """Annotation area if provided, else visible-keypoint box area (sides >= 1 px)."""
        if self.area is not None:
            return self.area
        pts = self.keypoints[self.visibility > 0]
        if len(pts) == 0:
            return 0.0
        w = max(float(pts[:, 0].max() - pts[:, 0].min()), 1.0)
        h = max(float(pts[:, 1].max() - pts[:, 1].min()), 1.0)
        return w * h


@dataclass(frozen=True)
class EvalResult:
    ap: float | None
    ap50: float | None
    ap75: float | None
    ap_m: float | None
    ap_l: float | None
    ar: float | None
    ar50: float | None
    ar75: float | None
    ar_m: float | None
    ar_l: float | None

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def to_json(self) -> str:
        return json.dumps(self.as_dict())

    def table_row(self) -> str:
        cells = ["  ----" if v is None else f"{v:6.3f}" for v in self.as_dict().values()]
        return " ".join(cells)

    @staticmethod
    def table_header() -> str:
        return " ".join(f"{name:>6}" for name in ("AP", "AP50", "AP75", "AP_M", "AP_L", "AR", "AR50", "AR75", "AR_M", "AR_L"))


def oks(pred_keypoints, gt_keypoints, gt_visibility, scale: float, params: OksParams) -> float:
    """Similarity in [0, 1]; only ground-truth-visible keypoints contribute."""
    if scale <= 0:
        raise ValueError(f"object scale must be positive, got {scale}")
    pred = np.asarray(pred_keypoints, dtype=np.float64).reshape(-1, 2)
    gt = np.asarray(gt_keypoints, dtype=np.float64).reshape(-1, 2)
    vis = np.asarray(gt_visibility, dtype=np.float64).reshape(-1)
    k = np.asarray(params.k, dtype=np.float64)
    if not (len(pred) == len(gt) == len(vis) == len(k)):
        raise ValueError(f"keypoint counts differ: pred {len(pred)}, gt {len(gt)}, vis {len(vis)}, k {len(k)}")
    mask = vis > 0
    if not mask.any():
        raise NoVisibleKeypoints("ground truth has no visible keypoints")
    d2 = ((pred[mask] - gt[mask]) ** 2).sum(axis=1)
    e = np.exp(-d2 / (2.0 * scale**2 * k[mask] ** 2))
    return float(e.sum() / mask.sum())


def _oks_of(det: Detection, gt: GroundTruthInstance, params: OksParams) -> float:
    return oks(det.keypoints, gt.keypoints, gt.visibility, np.sqrt(gt.effective_area()), params)


def _match_image(dets, gts, gt_valid, threshold, params):
    """Greedy per-image matching: best remaining OKS >= threshold wins.

    Returns (score, is_tp) records for detections that enter the PR curve;
    detections whose only match is an ignored ground truth are dropped.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    taken = [False] * len(gts)
    records = []
    for di in order:
        det = dets[di]
        best_j, best_oks = -1, 0.0
        for j, gt in enumerate(gts):
            if taken[j] or not gt_valid[j] or gt.num_visible == 0:
                continue
            value = _oks_of(det, gt, params)
            if value > best_oks:
                best_j, best_oks = j, value
        if best_j >= 0 and best_oks >= threshold:
            taken[best_j] = True
            records.append((det.score, True))
            continue
        ignored = False
        for j, gt in enumerate(gts):
            if taken[j] or gt_valid[j] or gt.num_visible == 0:
                continue
            if _oks_of(det, gt, params) >= threshold:
                ignored = True
                break
        if not ignored:
            records.append((det.score, False))
    return records


def _pr_summary(all_records, num_gt):
    """101-point interpolated AP and final recall from pooled detection records."""
    if num_gt == 0:
        return None, None
    if not all_records:
        return 0.0, 0.0
    all_records.sort(key=lambda r: (-r[0], r[1], r[2]))
    tp = np.cumsum([1.0 if r[3] else 0.0 for r in all_records])
    fp = np.cumsum([0.0 if r[3] else 1.0 for r in all_records])
    recall = tp / num_gt
    precision = tp / np.maximum(tp + fp, 1e-12)
    # precision envelope: best precision at any recall >= r
    env = precision.copy()
    for i in range(len(env) - 2, -1, -1):
        env[i] = max(env[i], env[i + 1])
    levels = np.linspace(0.0, 1.0, 101)
    idx = np.searchsorted(recall, levels, side="left")
    interp = np.where(idx < len(env), env[np.minimum(idx, len(env) - 1)], 0.0)
    return float(interp.mean()), float(recall[-1])


def _bucket_valid(gt: GroundTruthInstance, bucket) -> bool:
    if gt.num_visible == 0:
        return False
    if bucket is None:
        return True
    lo, hi = bucket
    return lo <= gt.effective_area() < hi


def _sweep(detections, ground_truths, thresholds, params, bucket):
    valid_per_image = [[_bucket_valid(gt, bucket) for gt in gts] for gts in ground_truths]
    num_gt = sum(sum(v) for v in valid_per_image)
    if num_gt == 0:
        return {t: (None, None) for t in thresholds}
    out = {}
    for t in thresholds:
        records = []
        for img, (dets, gts) in enumerate(zip(detections, ground_truths)):
            for di, (score, is_tp) in enumerate(_match_image(dets, gts, valid_per_image[img], t, params)):
                records.append((score, img, di, is_tp))
        out[t] = _pr_summary(records, num_gt)
    return out


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def evaluate_detections(
    detections: Sequence[Sequence[Detection]],
    ground_truths: Sequence[Sequence[GroundTruthInstance]],
    params: OksParams,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
) -> EvalResult:
    """Score per-image detections against annotations across thresholds and size buckets."""
    if len(detections) != len(ground_truths):
        raise ValueError(f"image counts differ: {len(detections)} detection lists, {len(ground_truths)} gt lists")
    thresholds = tuple(thresholds)
    if not any(gt.num_visible > 0 for gts in ground_truths for gt in gts):
        # nothing to score: every field is undefined, not zero
        return EvalResult(*(None,) * 10)
    all_b = _sweep(detections, ground_truths, thresholds, params, None)
    med_b = _sweep(detections, ground_truths, thresholds, params, MEDIUM_RANGE)
    lrg_b = _sweep(detections, ground_truths, thresholds, params, LARGE_RANGE)

    def at(bucket, t, idx):
        return bucket[t][idx]

    return EvalResult(
        ap=_mean([at(all_b, t, 0) for t in thresholds]),
        ap50=at(all_b, 0.5, 0) if 0.5 in all_b else None,
        ap75=at(all_b, 0.75, 0) if 0.75 in all_b else None,
        ap_m=_mean([at(med_b, t, 0) for t in thresholds]),
        ap_l=_mean([at(lrg_b, t, 0) for t in thresholds]),
        ar=_mean([at(all_b, t, 1) for t in thresholds]),
        ar50=at(all_b, 0.5, 1) if 0.5 in all_b else None,
        ar75=at(all_b, 0.75, 1) if 0.75 in all_b else None,
        ar_m=_mean([at(med_b, t, 1) for t in thresholds]),
        ar_l=_mean([at(lrg_b, t, 1) for t in thresholds]),
    )


# ---------------------------------------------------------------------------
# detection-file ingestion


def load_detections_jsonl(path: str, image_sizes: Sequence[tuple[float, float]]) -> list[list[Detection]]:
    """Read the package's JSON-lines prediction format, one image per line.

    Each line holds {"preds": [{"pose": [...], "class_probs": [p_human, p_non]}]};
    poses are normalized flat vectors and are decoded to pixels with the
    matching image size. Every slot becomes a detection scored by p_human;
    thresholding is the caller's business.
    """
    per_image: list[list[Detection]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{line_no}: invalid JSON: {e}") from e
            if len(per_image) >= len(image_sizes):
                raise ValueError(f"{path}:{line_no}: more prediction lines than images ({len(image_sizes)})")
            size = image_sizes[len(per_image)]
            dets = []
            for entry in record.get("preds", []):
                pose = from_flat(entry["pose"], PoseClass.HUMAN)
                kps = decode_pose(pose, size)
                dets.append(Detection([(kp.x, kp.y) for kp in kps], entry["class_probs"][0]))
            per_image.append(dets)
    return per_image


def load_detections_coco(path: str, image_ids: Sequence[int]) -> list[list[Detection]]:
    """Read a COCO results-format list of keypoint detections, grouped by image id."""
    with open(path, "r", encoding="utf-8") as fh:
        entries = json.load(fh)
    if not isinstance(entries, list):
        raise ValueError(f"{path}: COCO results file must be a JSON array")
    by_image: dict[int, list[Detection]] = {int(i): [] for i in image_ids}
    for pos, entry in enumerate(entries):
        img = int(entry["image_id"])
        if img not in by_image:
            continue
        triplets = np.asarray(entry["keypoints"], dtype=np.float64).reshape(-1, 3)
        by_image[img].append(Detection(triplets[:, :2], entry.get("score", 1.0)))
    return [by_image[int(i)] for i in image_ids]
