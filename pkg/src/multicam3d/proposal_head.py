"""First-stage dense head: per-cell classification, centerness, 2.5D center
(offset + depth), and auxiliary branches, followed by peak selection and
lifting into the ego frame.

All views and levels are processed as one flat cell axis (level-major, then
view, then row-major cells), which keeps the tape small; per-map views are
reconstructed on demand.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .encoder import N_LEVELS, STRIDES, FeaturePyramid
from .errors import ConfigError
from .geometry import CameraRig, lift_to_ego, project_to_view, yaw_in_camera
from .scene_sim import Scene, gt_2d_box
from .geometry import Z_MIN, box_corners_ego

AUX_BRANCHES = ("box2d", "corners", "rot", "size3d", "velocity")
SCALED_BRANCHES = ("offset", "depth", "box2d", "corners")
BRANCH_CHANNELS = {
    "cls": None,  # n_classes, resolved at init
    "ctr": 1,
    "offset": 2,
    "depth": 1,
    "box2d": 4,
    "corners": 16,
    "rot": 2,
    "size3d": 3,
    "velocity": 2,
}


@dataclass(frozen=True)
class LevelAssignSpec:
    """How objects distribute over pyramid levels and cells.

    ``ranges`` partitions (0, inf) by the square root of the 2D hull area in
    input pixels; ``radius`` is the center-sampling radius and ``sigma_c``
    the centerness bandwidth, both in level cells.
    """

    ranges: tuple[tuple[float, float], ...] = (
        (0.0, 64.0), (64.0, 128.0), (128.0, 256.0), (256.0, float("inf")))
    radius: float = 1.5
    sigma_c: float = 2.5

    def level_of(self, extent: float) -> int:
        for i, (lo, hi) in enumerate(self.ranges):
            if lo < extent <= hi:
                return i
        return len(self.ranges) - 1


class PyramidLayout:
    """Mapping between (view, level, row, col) cells and flat column indices."""

    def __init__(self, n_views: int, width: int, height: int):
        self.n_views = n_views
        self.sizes = [(height // s, width // s) for s in STRIDES]
        self.cells = [h * w for h, w in self.sizes]
        self.level_start = np.concatenate(
            [[0], np.cumsum([c * n_views for c in self.cells])])[:N_LEVELS + 1]
        self.total = int(self.level_start[-1])

    def col(self, view: int, level: int, row: int, col: int) -> int:
        h, w = self.sizes[level]
        return int(self.level_start[level] + view * self.cells[level] + row * w + col)

    def view_slice(self, view: int, level: int) -> tuple[int, int]:
        start = int(self.level_start[level] + view * self.cells[level])
        return start, self.cells[level]

    def cell_pixel(self, level: int, row: int, col: int) -> tuple[float, float]:
        """Image pixel of a cell center: ((col + 0.5) s, (row + 0.5) s)."""
        s = STRIDES[level]
        return (col + 0.5) * s, (row + 0.5) * s


@dataclass
class ProposalHeadParams:
    n_classes: int
    channels: int
    towers: dict[str, ad.Tensor]
    heads: dict[str, ad.Tensor]
    scales: dict[str, ad.Tensor]
    reduce_w: ad.Tensor
    reduce_b: ad.Tensor

    def named(self) -> dict[str, ad.Tensor]:
        out = {}
        for k, v in self.towers.items():
            out[f"proposal_head.{k}"] = v
        for k, v in self.heads.items():
            out[f"proposal_head.head_{k}"] = v
        for k, v in self.scales.items():
            out[f"proposal_head.scale_{k}"] = v
        out["proposal_head.reduce.w"] = self.reduce_w
        out["proposal_head.reduce.b"] = self.reduce_b
        return out


def init_proposal_head(n_classes: int, channels: int,
                       rng: np.random.Generator) -> ProposalHeadParams:
    c = channels

    def lin(rows, cols):
        return ad.parameter((rows, cols), rng, scale_=1.0 / np.sqrt(cols))

    towers = {}
    for tower in ("cls_tower", "reg_tower"):
        for i in range(2):
            towers[f"{tower}{i}.w"] = lin(c, c)
            towers[f"{tower}{i}.b"] = ad.parameter(rng.normal(size=c) * 0.05)
    heads = {}
    for branch, ch in BRANCH_CHANNELS.items():
        ch = n_classes if branch == "cls" else ch
        heads[f"{branch}.w"] = lin(ch, c)
        bias = np.zeros(ch)
        if branch == "cls":
            bias[:] = -np.log(99.0)  # focal-style prior of 0.01 foreground
        heads[f"{branch}.b"] = ad.parameter(bias)
    scales = {b: ad.parameter(np.ones(N_LEVELS)) for b in SCALED_BRANCHES}
    return ProposalHeadParams(
        n_classes=n_classes, channels=c, towers=towers, heads=heads, scales=scales,
        reduce_w=lin(c, 2 * c), reduce_b=ad.parameter(np.zeros(c)))


@dataclass
class DenseHeadOutput:
    """Flat per-cell maps over all views and levels; see PyramidLayout."""

    layout: PyramidLayout
    p_cls: ad.Tensor        # (N_c, total), post-sigmoid
    p_ctr: ad.Tensor        # (1, total), post-sigmoid
    offset: ad.Tensor       # (2, total), input-image pixels
    log_depth: ad.Tensor    # (1, total)
    aux: dict[str, ad.Tensor]
    cls_feat: ad.Tensor     # (C, total) classification-branch trunk
    reg_feat: ad.Tensor     # (C, total) regression-branch trunk

    def map_view(self, tensor: ad.Tensor, view: int, level: int) -> ad.Tensor:
        start, cells = self.layout.view_slice(view, level)
        h, w = self.layout.sizes[level]
        return ad.reshape(ad.narrow(tensor, 1, start, cells), (tensor.shape[0], h, w))

    def cls_map(self, view: int, level: int) -> ad.Tensor:
        return self.map_view(self.p_cls, view, level)

    def ctr_map(self, view: int, level: int) -> ad.Tensor:
        m = self.map_view(self.p_ctr, view, level)
        h, w = self.layout.sizes[level]
        return ad.reshape(m, (h, w))


def _tower(x: ad.Tensor, params: ProposalHeadParams, name: str) -> ad.Tensor:
    for i in range(2):
        x = ad.relu(ad.linear(params.towers[f"{name}{i}.w"], x,
                              params.towers[f"{name}{i}.b"]))
    return x


def _per_level_scale(raw: ad.Tensor, scale: ad.Tensor, layout: PyramidLayout) -> ad.Tensor:
    parts = []
    for level in range(N_LEVELS):
        start = int(layout.level_start[level])
        length = int(layout.level_start[level + 1]) - start
        block = ad.narrow(raw, 1, start, length)
        parts.append(ad.hadamard(block, ad.narrow(scale, 0, level, 1)))
    return ad.concat(parts, axis=1)


def dense_forward(pyramids: list[FeaturePyramid], params: ProposalHeadParams,
                  layout: PyramidLayout, with_aux: bool = True) -> DenseHeadOutput:
    """Run the shared towers and prediction heads over every view and level."""
    c = params.channels
    blocks = []
    for level in range(N_LEVELS):
        for pyr in pyramids:
            m = pyr.levels[level]
            blocks.append(ad.reshape(m, (c, m.shape[1] * m.shape[2])))
    x = ad.concat(blocks, axis=1)
    cls_feat = _tower(x, params, "cls_tower")
    reg_feat = _tower(x, params, "reg_tower")

    def head(branch, feat):
        return ad.linear(params.heads[f"{branch}.w"], feat, params.heads[f"{branch}.b"])

    p_cls = ad.sigmoid(head("cls", cls_feat))
    p_ctr = ad.sigmoid(head("ctr", cls_feat))
    offset = _per_level_scale(head("offset", reg_feat), params.scales["offset"], layout)
    log_depth = _per_level_scale(head("depth", reg_feat), params.scales["depth"], layout)
    aux = {}
    if with_aux:
        for branch in AUX_BRANCHES:
            raw = head(branch, reg_feat)
            if branch in SCALED_BRANCHES:
                raw = _per_level_scale(raw, params.scales[branch], layout)
            aux[branch] = raw
    return DenseHeadOutput(layout, p_cls, p_ctr, offset, log_depth, aux,
                           cls_feat, reg_feat)


def objectness(p_cls: ad.Tensor, p_ctr: ad.Tensor) -> ad.Tensor:
    """Foreground score: classwise max of p_cls times centerness, elementwise."""
    return ad.hadamard(ad.reduce_max(p_cls, axis=0), p_ctr)


@dataclass(frozen=True)
class Selection:
    view: int
    level: int
    row: int
    col: int
    score: float
    is_peak: bool


def _neighborhood_max(m: np.ndarray) -> np.ndarray:
    padded = np.full((m.shape[0] + 2, m.shape[1] + 2), -np.inf)
    padded[1:-1, 1:-1] = m
    stack = [padded[dy:dy + m.shape[0], dx:dx + m.shape[1]]
             for dy in range(3) for dx in range(3)]
    return np.max(stack, axis=0)


def select_proposals(obj_maps: dict[tuple[int, int], np.ndarray], n_pro: int,
                     score_min: float, use_peaks: bool = True) -> list[Selection]:
    """Pick up to ``n_pro`` cells across all views and levels.

    A cell is a peak when its value equals its 3x3 neighborhood max (edges
    padded with -inf). The n_pro best peaks are taken first; if fewer peaks
    exist the remaining slots fill with the best non-peak cells. Cells under
    ``score_min`` are dropped afterward. Ordering (and all tie-breaking) is
    by (-score, view, level, row, col).
    """
    if n_pro < 1:
        raise ConfigError("n_pro must be at least 1")
    peaks: list[Selection] = []
    rest: list[Selection] = []
    for (view, level) in sorted(obj_maps):
        m = obj_maps[(view, level)]
        is_peak = m >= _neighborhood_max(m) if use_peaks else np.zeros_like(m, dtype=bool)
        for row, col in np.ndindex(m.shape):
            sel = Selection(view, level, row, col, float(m[row, col]), bool(is_peak[row, col]))
            (peaks if sel.is_peak else rest).append(sel)
    key = lambda s: (-s.score, s.view, s.level, s.row, s.col)
    peaks.sort(key=key)
    chosen = peaks[:n_pro]
    if len(chosen) < n_pro:
        rest.sort(key=key)
        chosen = chosen + rest[:n_pro - len(chosen)]
        chosen.sort(key=key)
    return [s for s in chosen if s.score >= score_min]


@dataclass
class Proposal:
    """One stage-1 candidate: ego position plus provenance into the batch."""

    position: np.ndarray
    view: int
    level: int
    pixel: tuple[float, float]
    score: float
    index: int  # column in the batched feature/encoding matrices


# depth clamp applied when lifting proposals; keeps early-training outliers
# from producing astronomically distant positions (the depth loss still sees
# the raw prediction)
DEPTH_RANGE_M = (0.5, 200.0)


def build_proposals(selections: list[Selection], dense: DenseHeadOutput,
                    rig: CameraRig, params: ProposalHeadParams
                    ) -> tuple[list[Proposal], ad.Tensor | None]:
    """Lift selected cells to ego positions and cut their feature columns.

    The feature of a proposal is the linear reduction of the concatenated
    classification-branch and regression-branch trunk features at its cell.
    Returns the proposal list plus the batched (C, N) feature tensor.
    """
    if not selections:
        return [], None
    layout = dense.layout
    cols = np.array([layout.col(s.view, s.level, s.row, s.col) for s in selections])
    offsets = dense.offset.data[:, cols]
    depths = np.exp(np.clip(dense.log_depth.data[0, cols],
                            np.log(DEPTH_RANGE_M[0]), np.log(DEPTH_RANGE_M[1])))
    proposals = []
    for i, sel in enumerate(selections):
        u, v = layout.cell_pixel(sel.level, sel.row, sel.col)
        # center offsets beyond a few cells are regression outliers; clamp
        # them the same way as depth before lifting
        cap = 3.0 * STRIDES[sel.level]
        du = float(np.clip(offsets[0, i], -cap, cap))
        dv = float(np.clip(offsets[1, i], -cap, cap))
        position = lift_to_ego(sel.view, u, v, du, dv, float(depths[i]), rig)
        proposals.append(Proposal(position, sel.view, sel.level, (u, v),
                                  sel.score, i))
    both = ad.concat([ad.index_select(dense.cls_feat, 1, cols),
                      ad.index_select(dense.reg_feat, 1, cols)], axis=0)
    features = ad.linear(params.reduce_w, both, params.reduce_b)
    return proposals, features


@dataclass
class EmbedParams:
    """Learnable view and level encodings plus the shared projection."""

    e_view: ad.Tensor   # (M, C)
    e_level: ad.Tensor  # (N_LEVELS, C)
    proj_w: ad.Tensor   # (C, 2C + 3)
    proj_b: ad.Tensor
    r_max: float = 55.0

    def named(self) -> dict[str, ad.Tensor]:
        return {"embed.view": self.e_view, "embed.level": self.e_level,
                "embed.proj.w": self.proj_w, "embed.proj.b": self.proj_b}


def init_embed_params(n_views: int, channels: int,
                      rng: np.random.Generator) -> EmbedParams:
    c = channels
    return EmbedParams(
        e_view=ad.parameter((n_views, c), rng, scale_=0.1),
        e_level=ad.parameter((N_LEVELS, c), rng, scale_=0.1),
        proj_w=ad.parameter((c, 2 * c + 3), rng, scale_=1.0 / np.sqrt(2 * c + 3)),
        proj_b=ad.parameter(np.zeros(c)))


def proposal_encoding(positions, views, levels, embed: EmbedParams) -> ad.Tensor:
    """Compose per-proposal encodings: view row + level row + normalized
    position, linearly projected to C dims.

    ``positions`` is (3, N), either an array or a Tensor (a tensor keeps the
    encoding differentiable in the positions, used by the fixed-query bank).
    ``views`` or ``levels`` may be None for proposals without provenance; the
    corresponding rows then contribute zeros.
    """
    n = positions.shape[1]
    c = embed.proj_b.shape[0]
    if views is not None:
        view_rows = ad.transpose(ad.index_select(embed.e_view, 0, np.asarray(views)))
    else:
        view_rows = ad.Tensor(np.zeros((c, n)))
    if levels is not None:
        level_rows = ad.transpose(ad.index_select(embed.e_level, 0, np.asarray(levels)))
    else:
        level_rows = ad.Tensor(np.zeros((c, n)))
    if isinstance(positions, ad.Tensor):
        pos = ad.scale(positions, 1.0 / embed.r_max)
    else:
        pos = ad.Tensor(np.asarray(positions) / embed.r_max)
    stacked = ad.concat([view_rows, level_rows, pos], axis=0)
    return ad.linear(embed.proj_w, stacked, embed.proj_b)


@dataclass
class DenseTargets:
    """Flat per-cell supervision aligned with DenseHeadOutput."""

    layout: PyramidLayout
    cls: np.ndarray        # (N_c, total) one-hot
    ctr: np.ndarray        # (total,)
    pos_mask: np.ndarray   # (total,) bool
    offset: np.ndarray     # (2, total) pixels
    log_depth: np.ndarray  # (total,)
    box2d: np.ndarray      # (4, total) pixels (left, top, right, bottom)
    corners: np.ndarray    # (16, total) pixel offsets
    corner_mask: np.ndarray  # (total,) bool, all 8 corners in front
    rot: np.ndarray        # (2, total) (sin, cos) camera-frame yaw
    size3d: np.ndarray     # (3, total)
    velocity: np.ndarray   # (2, total)
    owner: np.ndarray      # (total,) object index or -1
    center_cells: list[tuple[int, int, int, int, int]]  # (obj, view, level, row, col)
    stride_per_cell: np.ndarray  # (total,)

    def objectness_maps(self) -> dict[tuple[int, int], np.ndarray]:
        """Ground-truth objectness per (view, level): classwise max times centerness."""
        flat = self.cls.max(axis=0) * self.ctr
        out = {}
        for view in range(self.layout.n_views):
            for level in range(N_LEVELS):
                start, cells = self.layout.view_slice(view, level)
                h, w = self.layout.sizes[level]
                out[(view, level)] = flat[start:start + cells].reshape(h, w)
        return out


def assign_dense_targets(scene: Scene, layout: PyramidLayout,
                         spec: LevelAssignSpec = LevelAssignSpec()) -> DenseTargets:
    """Assign every visible object to one level per view and mark the cells
    within the center-sampling radius of its projected center as positive.

    When two objects claim the same cell the nearer projected center wins.
    Objects whose center projects at or behind the near plane in a view get
    no positive cells there.
    """
    n_c = scene.config.n_classes
    total = layout.total
    t = DenseTargets(
        layout=layout,
        cls=np.zeros((n_c, total)), ctr=np.zeros(total),
        pos_mask=np.zeros(total, dtype=bool),
        offset=np.zeros((2, total)), log_depth=np.zeros(total),
        box2d=np.zeros((4, total)), corners=np.zeros((16, total)),
        corner_mask=np.zeros(total, dtype=bool), rot=np.zeros((2, total)),
        size3d=np.zeros((3, total)), velocity=np.zeros((2, total)),
        owner=np.full(total, -1, dtype=int),
        center_cells=[],
        stride_per_cell=np.concatenate(
            [np.full(layout.cells[lv] * layout.n_views, STRIDES[lv], dtype=float)
             for lv in range(N_LEVELS)]),
    )
    best_dist = np.full(total, np.inf)
    for view in range(layout.n_views):
        for obj_idx, box in enumerate(scene.boxes):
            hull = gt_2d_box(box, view, scene.rig)
            if hull is None:
                continue
            u_c, v_c, d_c, _ = project_to_view(box.center, view, scene.rig)
            if d_c <= Z_MIN:
                continue
            extent = float(np.sqrt(max(hull[2] - hull[0], 0.0)
                                   * max(hull[3] - hull[1], 0.0)))
            level = spec.level_of(extent)
            s = STRIDES[level]
            h, w = layout.sizes[level]
            cu, cv = u_c / s - 0.5, v_c / s - 0.5
            corner_px = np.zeros((8, 2))
            corner_front = True
            for i, corner in enumerate(box_corners_ego(box)):
                pu, pv, pd, _ = project_to_view(corner, view, scene.rig)
                corner_px[i] = (pu, pv)
                corner_front = corner_front and pd > Z_MIN
            theta_cam = yaw_in_camera(box.yaw, view, scene.rig)

            row_c, col_c = int(round(cv)), int(round(cu))
            if 0 <= row_c < h and 0 <= col_c < w:
                t.center_cells.append((obj_idx, view, level, row_c, col_c))
            for row in range(max(0, int(np.floor(cv - spec.radius))),
                             min(h - 1, int(np.ceil(cv + spec.radius))) + 1):
                for col in range(max(0, int(np.floor(cu - spec.radius))),
                                 min(w - 1, int(np.ceil(cu + spec.radius))) + 1):
                    dist = float(np.hypot(col - cu, row - cv))
                    if dist > spec.radius:
                        continue
                    flat = layout.col(view, level, row, col)
                    if dist >= best_dist[flat]:
                        continue
                    best_dist[flat] = dist
                    px, py = layout.cell_pixel(level, row, col)
                    t.pos_mask[flat] = True
                    t.owner[flat] = obj_idx
                    t.cls[:, flat] = 0.0
                    t.cls[box.class_id, flat] = 1.0
                    t.ctr[flat] = np.exp(-dist * dist / (2.0 * spec.sigma_c ** 2))
                    t.offset[:, flat] = (u_c - px, v_c - py)
                    t.log_depth[flat] = np.log(d_c)
                    t.box2d[:, flat] = (px - hull[0], py - hull[1],
                                        hull[2] - px, hull[3] - py)
                    t.corners[:, flat] = (corner_px - (px, py)).reshape(-1)
                    t.corner_mask[flat] = corner_front
                    t.rot[:, flat] = (np.sin(theta_cam), np.cos(theta_cam))
                    t.size3d[:, flat] = (box.w, box.l, box.h)
                    t.velocity[:, flat] = (box.vx, box.vy)
    return t
