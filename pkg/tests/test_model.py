import numpy as np
import pytest

import poet.autodiff as ad
from poet.loss import LossWeights, hungarian_loss
from poet.matching import build_cost_matrix, hungarian_assign
from poet.model import (
    BadDModel,
    IndivisibleInput,
    ModelConfig,
    backbone_forward,
    constant_params,
    desk_config,
    head_forward,
    init_params,
    model_forward,
    param_specs,
    positional_encoding,
    slots_from_outputs,
    transformer_forward,
    watch_params,
)
from poet.pose import PoseClass, PoseVector, pad_targets

TINY = desk_config(d_model=16, enc_layers=1, dec_layers=2, heads=4, num_queries=4, num_keypoints=2, ffn_hidden=24, backbone_channels=(8, 8), backbone_strides=(2, 2))


def tiny_images(rng, batch=2, size=16):
    return ad.Tensor(rng.uniform(0, 1, (batch, 3, size, size)))


def test_positional_encoding_deterministic_and_bounded():
    a = positional_encoding(6, 5, 32)
    b = positional_encoding(6, 5, 32)
    assert a.tobytes() == b.tobytes()
    assert a.shape == (30, 32)
    assert np.all(a >= -1.0) and np.all(a <= 1.0)


def test_positional_encoding_rows_distinct():
    for hf, wf in ((8, 8), (64, 64)):
        enc = positional_encoding(hf, wf, 8)
        assert len(np.unique(enc, axis=0)) == hf * wf


def test_positional_encoding_rejects_bad_width():
    with pytest.raises(BadDModel):
        positional_encoding(4, 4, 6)


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=30, heads=4)
    with pytest.raises(BadDModel):
        ModelConfig(d_model=18, heads=2)
    assert ModelConfig().num_queries == 25
    assert ModelConfig.paper_scale().enc_layers == 6
    assert desk_config().num_queries == 8


def test_backbone_stride_arithmetic():
    cfg = desk_config()
    params = constant_params(init_params(cfg, 0))
    images = tiny_images(np.random.default_rng(0), batch=1, size=64)
    feats = backbone_forward(images, params, cfg)
    assert feats.shape == (1, cfg.d_model, 8, 8)
    assert feats.shape[2] * feats.shape[3] == 64


def test_backbone_rejects_indivisible_input():
    cfg = desk_config()
    params = constant_params(init_params(cfg, 0))
    with pytest.raises(IndivisibleInput):
        backbone_forward(ad.Tensor(np.zeros((1, 3, 60, 64))), params, cfg)


def test_backbone_no_cross_sample_leakage():
    cfg = TINY
    params = constant_params(init_params(cfg, 3))
    rng = np.random.default_rng(5)
    images = rng.uniform(0, 1, (2, 3, 16, 16))
    both = backbone_forward(ad.Tensor(images), params, cfg).data
    one = backbone_forward(ad.Tensor(images[:1]), params, cfg).data
    two = backbone_forward(ad.Tensor(images[1:]), params, cfg).data
    np.testing.assert_array_equal(both, np.concatenate([one, two], axis=0))


def test_forward_shapes_and_per_layer_states():
    cfg = TINY
    params = constant_params(init_params(cfg, 1))
    outputs, states = model_forward(tiny_images(np.random.default_rng(2)), params, cfg)
    assert len(states) == cfg.dec_layers
    assert states[0].shape == (2, cfg.num_queries, cfg.d_model)
    assert outputs["class_probs"].shape == (2, cfg.num_queries, 2)
    assert outputs["center"].shape == (2, cfg.num_queries, 2)
    assert outputs["offsets"].shape == (2, cfg.num_queries, 2 * cfg.num_keypoints)
    assert outputs["visibility"].shape == (2, cfg.num_queries, 2 * cfg.num_keypoints)


def test_head_output_ranges():
    cfg = TINY
    params = constant_params(init_params(cfg, 4))
    outputs, _ = model_forward(tiny_images(np.random.default_rng(6)), params, cfg)
    probs = outputs["class_probs"].data
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(outputs["center"].data > 0) and np.all(outputs["center"].data < 1)
    vis = outputs["visibility"].data
    assert np.all(vis > 0) and np.all(vis < 1)
    np.testing.assert_array_equal(vis[..., 0::2], vis[..., 1::2])


def test_zero_weight_head_gives_neutral_outputs():
    cfg = TINY
    params = init_params(cfg, 0)
    for name in params:
        if name.startswith("head."):
            params[name] = np.zeros_like(params[name])
    outputs, _ = model_forward(tiny_images(np.random.default_rng(0)), constant_params(params), cfg)
    np.testing.assert_allclose(outputs["class_probs"].data, 0.5, atol=1e-15)
    np.testing.assert_allclose(outputs["center"].data, 0.5, atol=1e-15)
    np.testing.assert_allclose(outputs["visibility"].data, 0.5, atol=1e-15)


def test_decoder_prefix_property():
    from dataclasses import replace

    cfg = TINY
    params = constant_params(init_params(cfg, 7))
    rng = np.random.default_rng(8)
    feats = ad.Tensor(rng.normal(size=(1, 16, cfg.d_model)))
    pos = ad.Tensor(positional_encoding(4, 4, cfg.d_model))
    _, states_full = transformer_forward(feats, pos, params, cfg)
    _, states_one = transformer_forward(feats, pos, params, replace(cfg, dec_layers=1))
    assert states_one[0].data.tobytes() == states_full[0].data.tobytes()


def test_query_permutation_equivariance():
    cfg = TINY
    base = init_params(cfg, 9)
    rng = np.random.default_rng(10)
    images = tiny_images(rng, batch=1)
    out_a, _ = model_forward(images, constant_params(base), cfg)

    pi = np.random.default_rng(11).permutation(cfg.num_queries)
    permuted = dict(base)
    permuted["queries.weight"] = base["queries.weight"][pi]
    out_b, _ = model_forward(images, constant_params(permuted), cfg)

    for key in ("class_probs", "center", "offsets", "visibility"):
        np.testing.assert_allclose(out_b[key].data[:, :], out_a[key].data[:, pi], atol=1e-10)

    # matched loss is insensitive to the slot shuffle
    k = cfg.num_keypoints
    target = PoseVector((0.4, 0.6), (0.05,) * 2 * k, (1.0,) * 2 * k, PoseClass.HUMAN)
    targets = pad_targets([target], cfg.num_queries)
    w = LossWeights()
    slots_a = slots_from_outputs(out_a, cfg)[0]
    slots_b = slots_from_outputs(out_b, cfg)[0]
    loss_a = hungarian_loss(targets, slots_a, hungarian_assign(build_cost_matrix(targets, slots_a, w)), w, 1)
    loss_b = hungarian_loss(targets, slots_b, hungarian_assign(build_cost_matrix(targets, slots_b, w)), w, 1)
    assert loss_b.total == pytest.approx(loss_a.total, abs=1e-12)


def test_eval_forward_bit_deterministic():
    cfg = TINY
    params = constant_params(init_params(cfg, 12))
    images = tiny_images(np.random.default_rng(13))
    a, _ = model_forward(images, params, cfg, train=False)
    b, _ = model_forward(images, params, cfg, train=False)
    for key in a:
        assert a[key].data.tobytes() == b[key].data.tobytes()


def test_forward_finite_over_seeds():
    cfg = desk_config(d_model=16, enc_layers=1, dec_layers=1, heads=4, num_queries=3, num_keypoints=2, ffn_hidden=16, backbone_channels=(8,), backbone_strides=(2,))
    images = tiny_images(np.random.default_rng(0), batch=1, size=8)
    for seed in range(100):
        outputs, _ = model_forward(images, constant_params(init_params(cfg, seed)), cfg)
        for t in outputs.values():
            assert np.all(np.isfinite(t.data))


def test_init_params_deterministic_and_xavier():
    cfg = desk_config(d_model=256, ffn_hidden=256, num_keypoints=3)
    a = init_params(cfg, 42)
    b = init_params(cfg, 42)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    w = a["encoder.layer0.attn.wq"]
    assert w.shape == (256, 256)
    target_var = 2.0 / (256 + 256)
    assert abs(w.var() - target_var) / target_var < 0.10
    assert not np.any(a["head.class.bias"])
    assert not np.any(a["backbone.stage0.bias"])
    np.testing.assert_array_equal(a["encoder.layer0.ln1.gain"], 1.0)


def test_param_specs_cover_params_exactly():
    cfg = TINY
    params = init_params(cfg, 0)
    names = [name for name, _, _ in param_specs(cfg)]
    assert list(params) == names
    assert len(set(names)) == len(names)


def test_train_flag_dropout_changes_forward():
    cfg = TINY
    params = constant_params(init_params(cfg, 14))
    images = tiny_images(np.random.default_rng(15), batch=1)
    eval_out, _ = model_forward(images, params, cfg, train=False)
    train_out, _ = model_forward(images, params, cfg, train=True, rng=np.random.default_rng(16))
    assert not np.allclose(eval_out["class_probs"].data, train_out["class_probs"].data)


def test_end_to_end_gradients_match_finite_differences():
    cfg = desk_config(d_model=8, enc_layers=1, dec_layers=1, heads=2, num_queries=2, num_keypoints=1, ffn_hidden=8, backbone_channels=(4,), backbone_strides=(2,))
    base = init_params(cfg, 17)
    rng = np.random.default_rng(18)
    images = rng.uniform(0, 1, (1, 3, 4, 4))
    probe = {}

    def forward_loss(params_np):
        tape = ad.Tape()
        tensors = watch_params(tape, params_np)
        outputs, _ = model_forward(ad.Tensor(images), tensors, cfg, train=False)
        vec = ad.concat(
            [
                ad.reshape(outputs["class_probs"], (1, -1 if False else 2 * cfg.num_queries)),
                ad.reshape(outputs["center"], (1, 2 * cfg.num_queries)),
                ad.reshape(outputs["offsets"], (1, 2 * cfg.num_keypoints * cfg.num_queries)),
                ad.reshape(outputs["visibility"], (1, 2 * cfg.num_keypoints * cfg.num_queries)),
            ],
            axis=1,
        )
        if "values" not in probe:
            probe["values"] = np.random.default_rng(19).normal(size=vec.shape)
        loss = ad.reduce_sum(ad.mul(vec, ad.Tensor(probe["values"])))
        return loss, tensors

    loss, tensors = forward_loss(base)
    grads = ad.backward(loss)
    for name in ("queries.weight", "head.pose.w3", "encoder.layer0.attn.wq", "backbone.stage0.weight", "decoder.layer0.ln2.gain"):
        def f(t, name=name):
            trial = dict(base)
            trial[name] = t.data
            value, _ = forward_loss(trial)
            return float(value.data)

        numeric = ad.finite_diff(f, ad.Tensor(base[name]), eps=1e-5)
        err = ad.relative_error(grads.wrt(tensors[name]), numeric.data)
        assert err < 1e-4, f"{name}: rel err {err}"
