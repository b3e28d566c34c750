"""Proposal head tests: objectness, peak selection, lifting, encodings, and
dense target assignment, each against brute-force oracles."""

import numpy as np
import pytest

from multicam3d import autodiff as ad
from multicam3d import geometry as geo
from multicam3d.encoder import STRIDES
from multicam3d.proposal_head import (DenseHeadOutput, LevelAssignSpec,
                                      PyramidLayout, Selection,
                                      assign_dense_targets, build_proposals,
                                      init_embed_params, init_proposal_head,
                                      objectness, proposal_encoding,
                                      select_proposals)
from multicam3d.scene_sim import Box3D, Scene, SimConfig, build_surround_rig, sample_scene

from conftest import identity_rig


# ---------------------------------------------------------------------------
# objectness (classwise max times centerness)


def test_objectness_single_cell():
    p_cls = ad.Tensor(np.array([[0.2], [0.6]]))
    p_ctr = ad.Tensor(np.array([0.5]))
    np.testing.assert_allclose(objectness(p_cls, p_ctr).data, [0.3])


def test_objectness_unit_centerness_is_class_max(rng):
    p_cls = ad.Tensor(rng.uniform(size=(3, 10)))
    p_ctr = ad.Tensor(np.ones(10))
    np.testing.assert_array_equal(objectness(p_cls, p_ctr).data,
                                  p_cls.data.max(axis=0))


def test_objectness_matches_per_cell_loop(rng):
    p_cls = rng.uniform(size=(3, 4, 4))
    p_ctr = rng.uniform(size=(4, 4))
    out = objectness(ad.Tensor(p_cls), ad.Tensor(p_ctr)).data
    for i in range(4):
        for j in range(4):
            expected = max(p_cls[c, i, j] for c in range(3)) * p_ctr[i, j]
            assert abs(out[i, j] - expected) < 1e-15


# ---------------------------------------------------------------------------
# peak selection


def brute_force_select(obj_maps, n_pro, score_min, use_peaks=True):
    """Independent reference: explicit neighborhood scan and stable sorting."""
    peaks, rest = [], []
    for (view, level) in sorted(obj_maps):
        m = obj_maps[(view, level)]
        h, w = m.shape
        for row in range(h):
            for col in range(w):
                neigh = []
                for dr in (-1, 0, 1):
                    for dc in (-1, 0, 1):
                        r, c = row + dr, col + dc
                        neigh.append(m[r, c] if 0 <= r < h and 0 <= c < w else -np.inf)
                entry = (view, level, row, col, float(m[row, col]))
                if use_peaks and m[row, col] >= max(neigh):
                    peaks.append(entry)
                else:
                    rest.append(entry)
    key = lambda e: (-e[4], e[0], e[1], e[2], e[3])
    peaks.sort(key=key)
    chosen = peaks[:n_pro]
    if len(chosen) < n_pro:
        rest.sort(key=key)
        chosen += rest[:n_pro - len(chosen)]
        chosen.sort(key=key)
    return [e for e in chosen if e[4] >= score_min]


def test_select_single_spike():
    m = np.zeros((5, 5))
    m[2, 3] = 1.0
    out = select_proposals({(0, 0): m}, n_pro=1, score_min=0.05)
    assert len(out) == 1 and (out[0].row, out[0].col) == (2, 3)


def test_select_adjacent_equal_maxima_both_peaks():
    m = np.zeros((4, 4))
    m[1, 1] = m[1, 2] = 0.9
    out = select_proposals({(0, 0): m}, n_pro=8, score_min=0.5)
    assert len(out) == 2
    assert all(s.is_peak for s in out)
    assert {(s.row, s.col) for s in out} == {(1, 1), (1, 2)}


def test_select_matches_brute_force(rng):
    for trial in range(20):
        maps = {}
        for view in range(2):
            for level in range(2):
                maps[(view, level)] = rng.uniform(size=(5, 6))
        got = select_proposals(maps, n_pro=20, score_min=0.3)
        want = brute_force_select(maps, 20, 0.3)
        assert [(s.view, s.level, s.row, s.col, s.score) for s in got] == want


def test_select_fill_rule_without_enough_peaks(rng):
    m = rng.uniform(0.5, 1.0, size=(4, 4))
    got = select_proposals({(0, 0): m}, n_pro=10, score_min=0.0)
    want = brute_force_select({(0, 0): m}, 10, 0.0)
    assert len(got) == 10
    assert [(s.row, s.col) for s in got] == [(e[2], e[3]) for e in want]


def test_select_no_adjacent_peaks_unless_equal(rng):
    for trial in range(10):
        m = rng.uniform(size=(8, 8))
        out = select_proposals({(0, 0): m}, n_pro=64, score_min=0.0)
        peaks = [s for s in out if s.is_peak]
        for a in peaks:
            for b in peaks:
                if a is b:
                    continue
                if max(abs(a.row - b.row), abs(a.col - b.col)) <= 1:
                    assert a.score == b.score


def test_select_score_min_drops_after_fill():
    m = np.array([[0.9, 0.0], [0.0, 0.02]])
    out = select_proposals({(0, 0): m}, n_pro=4, score_min=0.05)
    assert [(s.row, s.col) for s in out] == [(0, 0)]


# ---------------------------------------------------------------------------
# proposal construction


def make_dense_stub(layout, rig, rng, n_classes=2, channels=8,
                    offset_data=None, depth_data=None):
    params = init_proposal_head(n_classes, channels, rng)
    total = layout.total
    offset = ad.Tensor(offset_data if offset_data is not None else np.zeros((2, total)))
    depth = ad.Tensor(depth_data if depth_data is not None else np.zeros((1, total)))
    dense = DenseHeadOutput(
        layout=layout,
        p_cls=ad.Tensor(rng.uniform(size=(n_classes, total))),
        p_ctr=ad.Tensor(rng.uniform(size=(1, total))),
        offset=offset, log_depth=depth, aux={},
        cls_feat=ad.Tensor(rng.normal(size=(channels, total))),
        reg_feat=ad.Tensor(rng.normal(size=(channels, total))),
    )
    return dense, params


def test_build_proposal_identity_rig_unit_depth(rng):
    rig = identity_rig(width=64, height=64)
    layout = PyramidLayout(1, 64, 64)
    dense, params = make_dense_stub(layout, rig, rng)
    sel = Selection(0, 0, 0, 0, 0.9, True)
    proposals, feats = build_proposals([sel], dense, rig, params)
    # cell (0, 0) at stride 8 sits at pixel (4, 4); unit depth through K = I
    np.testing.assert_allclose(proposals[0].position, [4.0, 4.0, 1.0], atol=1e-12)
    assert proposals[0].pixel == (4.0, 4.0)
    assert feats.shape == (8, 1)


def test_build_proposal_log_depth_shift_doubles_camera_coords(rng):
    rig = identity_rig(width=64, height=64)
    layout = PyramidLayout(1, 64, 64)
    base = np.zeros((1, layout.total))
    doubled = np.full((1, layout.total), np.log(2.0))
    sel = Selection(0, 1, 1, 2, 0.5, True)
    d1, params = make_dense_stub(layout, rig, rng, depth_data=base)
    d2, _ = make_dense_stub(layout, rig, rng, depth_data=doubled)
    p1, _ = build_proposals([sel], d1, rig, params)
    p2, _ = build_proposals([sel], d2, rig, params)
    np.testing.assert_allclose(p2[0].position, 2.0 * p1[0].position, rtol=1e-12)


def test_build_proposal_matches_matrix_oracle(rng):
    cfg = SimConfig(n_views=2)
    rig = build_surround_rig(cfg)
    layout = PyramidLayout(2, cfg.image_width, cfg.image_height)
    offs = rng.normal(scale=3.0, size=(2, layout.total))
    deps = rng.normal(scale=0.4, size=(1, layout.total))
    dense, params = make_dense_stub(layout, rig, rng, offset_data=offs, depth_data=deps)
    sels = [Selection(0, 0, 3, 5, 0.9, True), Selection(1, 2, 1, 1, 0.8, True)]
    proposals, _ = build_proposals(sels, dense, rig, params)
    for prop, sel in zip(proposals, sels):
        s = STRIDES[sel.level]
        u = (sel.col + 0.5) * s
        v = (sel.row + 0.5) * s
        flat = layout.col(sel.view, sel.level, sel.row, sel.col)
        du, dv = offs[:, flat]
        d = np.exp(deps[0, flat])
        view = rig.views[sel.view]
        ray = np.linalg.inv(view.intrinsics.k) @ np.array([u + du, v + dv, 1.0]) * d
        expected = (view.extrinsics.t @ np.array([*ray, 1.0]))[:3]
        np.testing.assert_allclose(prop.position, expected, atol=1e-9)
        assert prop.score == sel.score


# ---------------------------------------------------------------------------
# encodings


def test_encoding_zero_everything_gives_zero(rng):
    embed = init_embed_params(2, 8, rng)
    embed.e_view.data[:] = 0
    embed.e_level.data[:] = 0
    embed.proj_b.data[:] = 0
    enc = proposal_encoding(np.zeros((3, 4)), [0, 1, 0, 1], [0, 1, 2, 3], embed)
    assert not enc.data.any()


def test_encoding_differs_across_views(rng):
    embed = init_embed_params(3, 8, rng)
    pos = np.zeros((3, 2))
    enc = proposal_encoding(pos, [0, 2], [1, 1], embed)
    assert np.abs(enc.data[:, 0] - enc.data[:, 1]).max() > 1e-6


def test_encoding_output_dim_is_channels(rng):
    for m, c in ((2, 8), (5, 16)):
        embed = init_embed_params(m, c, rng)
        enc = proposal_encoding(rng.normal(size=(3, 7)),
                                rng.integers(0, m, 7), rng.integers(0, 4, 7), embed)
        assert enc.shape == (c, 7)


# ---------------------------------------------------------------------------
# dense target assignment


def test_level_assignment_ranges():
    spec = LevelAssignSpec()
    assert spec.level_of(40.0) == 0
    assert spec.level_of(64.0) == 0
    assert spec.level_of(64.1) == 1
    assert spec.level_of(200.0) == 2
    assert spec.level_of(1e9) == 3


def lifted_box(rig, cfg, pixel, depth, level_stride=8, class_id=0):
    center = geo.lift_to_ego(0, pixel[0], pixel[1], 0.0, 0.0, depth, rig)
    return Box3D(*center, 1.6, 4.0, 1.5, 0.3, 0.0, 0.0, class_id)


def test_center_cell_gets_unit_centerness():
    cfg = SimConfig(n_views=1, image_width=192, image_height=128)
    rig = build_surround_rig(cfg)
    layout = PyramidLayout(1, cfg.image_width, cfg.image_height)
    # a box whose center projects exactly onto the center of cell (7, 11) at
    # stride 8, i.e. pixel ((11 + .5) * 8, (7 + .5) * 8); a car-sized hull at
    # depth 18 m is ~18 px across, so the object lands on level 0
    box = lifted_box(rig, cfg, ((11 + 0.5) * 8, (7 + 0.5) * 8), depth=18.0)
    scene = Scene(rig, [box], seed=0, config=cfg)
    targets = assign_dense_targets(scene, layout)
    from multicam3d.scene_sim import gt_2d_box
    hull = gt_2d_box(box, 0, rig)
    extent = np.sqrt((hull[2] - hull[0]) * (hull[3] - hull[1]))
    assert LevelAssignSpec().level_of(extent) == 0
    flat = layout.col(0, 0, 7, 11)
    assert targets.ctr[flat] == pytest.approx(1.0)
    np.testing.assert_allclose(targets.offset[:, flat], [0.0, 0.0], atol=1e-9)
    assert targets.log_depth[flat] == pytest.approx(np.log(18.0))


def brute_force_targets(scene, layout, spec):
    """Cell-major re-derivation of the assignment rules."""
    from multicam3d.scene_sim import gt_2d_box
    n_c = scene.config.n_classes
    per_obj_view = {}
    for view in range(layout.n_views):
        for oi, box in enumerate(scene.boxes):
            hull = gt_2d_box(box, view, scene.rig)
            if hull is None:
                continue
            u_c, v_c, d_c, _ = geo.project_to_view(box.center, view, scene.rig)
            if d_c <= geo.Z_MIN:
                continue
            extent = np.sqrt(max(hull[2] - hull[0], 0) * max(hull[3] - hull[1], 0))
            per_obj_view[(oi, view)] = (spec.level_of(extent), u_c, v_c, d_c)
    owner = np.full(layout.total, -1, dtype=int)
    ctr = np.zeros(layout.total)
    for view in range(layout.n_views):
        for level in range(4):
            h, w = layout.sizes[level]
            s = STRIDES[level]
            for row in range(h):
                for col in range(w):
                    best, best_d = -1, np.inf
                    for oi in range(len(scene.boxes)):
                        info = per_obj_view.get((oi, view))
                        if info is None or info[0] != level:
                            continue
                        _, u_c, v_c, _ = info
                        dist = np.hypot(col - (u_c / s - 0.5), row - (v_c / s - 0.5))
                        if dist <= spec.radius and dist < best_d:
                            best, best_d = oi, dist
                    if best >= 0:
                        flat = layout.col(view, level, row, col)
                        owner[flat] = best
                        ctr[flat] = np.exp(-best_d ** 2 / (2 * spec.sigma_c ** 2))
    return owner, ctr


def test_assignment_matches_brute_force():
    cfg = SimConfig(n_views=3)
    spec = LevelAssignSpec()
    found_multi = False
    for seed in (41, 42, 43):
        scene = sample_scene(cfg, seed)
        scene.boxes = scene.boxes[:3]
        layout = PyramidLayout(cfg.n_views, cfg.image_width, cfg.image_height)
        targets = assign_dense_targets(scene, layout, spec)
        owner, ctr = brute_force_targets(scene, layout, spec)
        np.testing.assert_array_equal(targets.owner, owner)
        np.testing.assert_allclose(targets.ctr, ctr, atol=1e-12)
        found_multi = found_multi or (targets.pos_mask.sum() > 0)
    assert found_multi


def test_each_visible_object_gets_positive_cells_and_one_level():
    cfg = SimConfig()
    layout = PyramidLayout(cfg.n_views, cfg.image_width, cfg.image_height)
    checked_objects = 0
    for seed in (60, 61, 62):
        scene = sample_scene(cfg, seed)
        targets = assign_dense_targets(scene, layout)
        for oi in range(len(scene.boxes)):
            cells = np.nonzero(targets.owner == oi)[0]
            visible_views = {view for (o, view, *_rest) in targets.center_cells if o == oi}
            if not visible_views:
                continue
            checked_objects += 1
            assert cells.size >= 1
            for view in range(layout.n_views):
                levels = set()
                for flat in cells:
                    for level in range(4):
                        start, n = layout.view_slice(view, level)
                        if start <= flat < start + n:
                            levels.add(level)
                assert len(levels) <= 1, f"object {oi} spans levels {levels} in view {view}"
    assert checked_objects >= 10


def test_lift_of_center_cell_targets_recovers_gt_center():
    cfg = SimConfig()
    layout = PyramidLayout(cfg.n_views, cfg.image_width, cfg.image_height)
    checked = 0
    for seed in (70, 71):
        scene = sample_scene(cfg, seed)
        targets = assign_dense_targets(scene, layout)
        for (oi, view, level, row, col) in targets.center_cells:
            flat = layout.col(view, level, row, col)
            if targets.owner[flat] != oi:
                continue
            u, v = layout.cell_pixel(level, row, col)
            du, dv = targets.offset[:, flat]
            depth = np.exp(targets.log_depth[flat])
            p = geo.lift_to_ego(view, u, v, du, dv, depth, scene.rig)
            np.testing.assert_allclose(p, scene.boxes[oi].center, atol=1e-6)
            checked += 1
    assert checked >= 10
