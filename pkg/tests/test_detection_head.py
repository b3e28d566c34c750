"""Detection head tests: feature aggregation, attention against a dense
single-head oracle, decode/update, layer composition, and gradient checks."""

import numpy as np
import pytest

from multicam3d import autodiff as ad
from multicam3d.detection_head import (LayerOutput, RefineLayerParams,
                                       aggregate_features,
                                       aggregate_features_batch, decode_boxes,
                                       decode_and_update, init_refine_layer,
                                       run_refinement, self_attention)
from multicam3d.encoder import FeaturePyramid
from multicam3d.geometry import (CameraExtrinsics, CameraIntrinsics,
                                 CameraRig, CameraView)
from multicam3d.proposal_head import init_embed_params, proposal_encoding

from conftest import identity_rig


def const_pyramid(value, c=4, base=8):
    levels = [ad.Tensor(np.full((c, base >> k, base >> k), value)) for k in range(4)]
    return FeaturePyramid(levels)


def two_view_identity_rig(width=64, height=64):
    k = np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]])
    view = lambda: CameraView(CameraIntrinsics(k), CameraExtrinsics(np.eye(4)),
                              width, height)
    return CameraRig((view(), view()))


def test_aggregate_single_valid_sample():
    rig = identity_rig(width=64, height=64)
    # u = v = 52: inside the stride-8 grid only (52/16 = 3.25 > 3, etc.)
    pyr = const_pyramid(2.5)
    feature = ad.Tensor(np.zeros(4))
    out = aggregate_features(np.array([52.0, 52.0, 1.0]), feature, [pyr], rig)
    np.testing.assert_allclose(out.data, np.full(4, 2.5))


def test_aggregate_mean_plus_residual():
    rig = two_view_identity_rig()
    pyrs = [const_pyramid(1.0), const_pyramid(3.0)]
    feature = ad.Tensor(np.ones(4))
    out = aggregate_features(np.array([52.0, 52.0, 1.0]), feature, pyrs, rig)
    np.testing.assert_allclose(out.data, np.full(4, 3.0))  # residual 1 + mean 2


def test_aggregate_no_valid_projection_passthrough():
    rig = identity_rig(width=64, height=64)
    feature = ad.Tensor(np.array([1.0, -2.0, 0.5, 7.0]))
    out = aggregate_features(np.array([0.0, 0.0, -5.0]), feature, [const_pyramid(9.0)], rig)
    np.testing.assert_array_equal(out.data, feature.data)


def test_aggregate_batch_matches_per_proposal_op(rng):
    rig = two_view_identity_rig()
    pyrs = []
    for _ in range(2):
        levels = [ad.Tensor(rng.normal(size=(4, 8 >> k, 8 >> k))) for k in range(4)]
        pyrs.append(FeaturePyramid(levels))
    n = 7
    positions = np.vstack([rng.uniform(-30, 60, size=(2, n)), rng.uniform(0.5, 3, size=(1, n))])
    feats = ad.Tensor(rng.normal(size=(4, n)))
    batched = aggregate_features_batch(positions, feats, pyrs, rig)
    for i in range(n):
        column = ad.reshape(ad.narrow(feats, 1, i, 1), (4,))
        single = aggregate_features(positions[:, i], column, pyrs, rig)
        np.testing.assert_allclose(batched.data[:, i], single.data, atol=1e-12)


def test_attention_single_proposal_adds_value(rng):
    layer = init_refine_layer(8, 2, 1, rng)
    f = ad.Tensor(rng.normal(size=(8, 1)))
    e = ad.Tensor(rng.normal(size=(8, 1)))
    out = self_attention(f, e, layer)
    s = f.data + e.data
    v = layer.wv.data @ s + layer.bv.data[:, None]
    np.testing.assert_allclose(out.data, f.data + v, atol=1e-12)


def test_attention_zero_queries_give_uniform_mean(rng):
    layer = init_refine_layer(8, 2, 1, rng)
    layer.wq.data[:] = 0.0
    layer.bq.data[:] = 0.0
    f = ad.Tensor(rng.normal(size=(8, 5)))
    e = ad.Tensor(rng.normal(size=(8, 5)))
    out = self_attention(f, e, layer)
    s = f.data + e.data
    v = layer.wv.data @ s + layer.bv.data[:, None]
    np.testing.assert_allclose(out.data, f.data + v.mean(axis=1, keepdims=True),
                               atol=1e-12)


def test_attention_matches_dense_single_head_oracle(rng):
    c, n = 8, 6
    layer = init_refine_layer(c, 2, 1, rng)
    f = ad.Tensor(rng.normal(size=(c, n)))
    e = ad.Tensor(rng.normal(size=(c, n)))
    out = self_attention(f, e, layer)
    s = f.data + e.data
    q = layer.wq.data @ s + layer.bq.data[:, None]
    k = layer.wk.data @ s + layer.bk.data[:, None]
    v = layer.wv.data @ s + layer.bv.data[:, None]
    expected = f.data.copy()
    for i in range(n):
        logits = np.array([q[:, i] @ k[:, j] for j in range(n)]) / np.sqrt(c)
        w = np.exp(logits - logits.max())
        w /= w.sum()
        expected[:, i] += sum(w[j] * v[:, j] for j in range(n))
    np.testing.assert_allclose(out.data, expected, atol=1e-10)


def test_multi_head_attention_shape_and_determinism(rng):
    layer = init_refine_layer(8, 2, 4, rng)
    f = ad.Tensor(rng.normal(size=(8, 5)))
    e = ad.Tensor(rng.normal(size=(8, 5)))
    a = self_attention(f, e, layer)
    b = self_attention(f, e, layer)
    assert a.shape == (8, 5)
    np.testing.assert_array_equal(a.data, b.data)


def test_decode_zero_regression_keeps_position_and_zero_yaw(rng):
    layer = init_refine_layer(8, 2, 2, rng)
    layer.reg_w.data[:] = 0.0
    layer.reg_b.data[:] = 0.0
    f = ad.Tensor(rng.normal(size=(8, 3)))
    pos = rng.normal(size=(3, 3))
    logits, reg, new_pos = decode_and_update(f, pos, layer)
    np.testing.assert_array_equal(new_pos, pos)
    boxes = decode_boxes(reg.data, pos)
    np.testing.assert_array_equal(boxes["yaw"], np.zeros(3))  # atan2(0, 0) = 0
    np.testing.assert_allclose(boxes["size"], np.ones((3, 3)))


def test_decode_residual_moves_position(rng):
    layer = init_refine_layer(8, 2, 2, rng)
    layer.reg_w.data[:] = 0.0
    layer.reg_b.data[:] = 0.0
    layer.reg_b.data[:3] = (1.0, -1.0, 0.5)
    f = ad.Tensor(rng.normal(size=(8, 1)))
    _, reg, new_pos = decode_and_update(f, np.zeros((3, 1)), layer)
    np.testing.assert_allclose(new_pos[:, 0], [1.0, -1.0, 0.5])


def test_decode_sin_cos_to_yaw():
    reg = np.zeros((10, 1))
    reg[6, 0] = 1.0  # sin
    reg[7, 0] = 0.0  # cos
    out = decode_boxes(reg, np.zeros((3, 1)))
    np.testing.assert_allclose(out["yaw"], [np.pi / 2])


def refinement_setup(rng, n=5, c=8, heads=2, n_views=1, layers=2):
    rig = identity_rig(width=64, height=64)
    if n_views == 2:
        rig = two_view_identity_rig()
    pyrs = []
    for _ in range(n_views):
        levels = [ad.Tensor(rng.normal(size=(c, 8 >> k, 8 >> k)), requires_grad=True)
                  for k in range(4)]
        pyrs.append(FeaturePyramid(levels))
    feats = ad.Tensor(rng.normal(size=(c, n)), requires_grad=True)
    positions = np.vstack([rng.uniform(5, 50, size=(2, n)), rng.uniform(0.8, 2.5, size=(1, n))])
    views = rng.integers(0, n_views, size=n)
    levels_idx = rng.integers(0, 4, size=n)
    layer_params = [init_refine_layer(c, 2, heads, rng) for _ in range(layers)]
    embed = init_embed_params(n_views, c, rng)
    return rig, pyrs, feats, positions, views, levels_idx, layer_params, embed


def test_single_layer_equals_manual_composition(rng):
    rig, pyrs, feats, pos, views, levels, layers, embed = refinement_setup(rng, layers=1)
    out = run_refinement(feats, pos, views, levels, pyrs, rig, layers, embed)[0]
    layer = layers[0]
    enc = proposal_encoding(pos, views, levels, embed)
    agg = aggregate_features_batch(pos, feats, pyrs, rig)
    mixed = ad.add(agg, ad.relu(ad.linear(layer.mix_w, agg, layer.mix_b)))
    att = self_attention(mixed, enc, layer)
    logits, reg, new_pos = decode_and_update(att, pos, layer)
    np.testing.assert_allclose(out.logits.data, logits.data, atol=1e-12)
    np.testing.assert_allclose(out.reg.data, reg.data, atol=1e-12)
    np.testing.assert_allclose(out.post_positions, new_pos, atol=1e-12)


def test_positions_accumulate_residuals(rng):
    rig, pyrs, feats, pos, views, levels, layers, embed = refinement_setup(rng, layers=3)
    outs = run_refinement(feats, pos, views, levels, pyrs, rig, layers, embed)
    acc = pos.copy()
    for out in outs:
        np.testing.assert_allclose(out.pre_positions, acc, atol=1e-12)
        acc = acc + out.reg.data[:3]
        np.testing.assert_allclose(out.post_positions, acc, atol=1e-12)


def test_permutation_equivariance(rng):
    rig, pyrs, feats, pos, views, levels, layers, embed = refinement_setup(rng, n=6)
    perm = rng.permutation(6)
    outs = run_refinement(feats, pos, views, levels, pyrs, rig, layers, embed)
    feats_p = ad.Tensor(feats.data[:, perm])
    outs_p = run_refinement(feats_p, pos[:, perm], views[perm], levels[perm],
                            pyrs, rig, layers, embed)
    for a, b in zip(outs, outs_p):
        np.testing.assert_allclose(b.logits.data, a.logits.data[:, perm], atol=1e-9)
        np.testing.assert_allclose(b.reg.data, a.reg.data[:, perm], atol=1e-9)


def test_two_layer_gradient_check(rng):
    """Positions are a stop-gradient path, so the finite-difference probe
    pins them at their base-run values and checks every traced parameter."""
    rig, pyrs, feats, pos, views, levels, layers, embed = refinement_setup(
        rng, n=4, c=8, heads=2, layers=2)
    w_cls = rng.normal(size=(3, 4))
    w_reg = rng.normal(size=(10, 4))
    base = run_refinement(feats, pos, views, levels, pyrs, rig, layers, embed)
    pinned = [out.pre_positions for out in base]
    tensors = [feats] + [t for lp in layers for t in vars(lp).values()
                         if isinstance(t, ad.Tensor)]
    tensors += list(embed.named().values())
    tensors += [lv for pyr in pyrs for lv in pyr.levels]

    def f():
        outs = run_refinement(feats, pos, views, levels, pyrs, rig, layers, embed,
                              pinned_positions=pinned)
        loss = ad.reduce_sum(ad.hadamard(outs[-1].logits, ad.Tensor(w_cls)))
        loss = ad.add(loss, ad.reduce_sum(ad.hadamard(outs[-1].reg, ad.Tensor(w_reg))))
        for out in outs[:-1]:
            loss = ad.add(loss, ad.reduce_sum(ad.smooth_l1(out.reg)))
        return loss

    err = ad.gradient_check(f, tensors, h=1e-5)
    assert err < 1e-5, err
