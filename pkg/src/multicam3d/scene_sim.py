"""Deterministic synthetic scenes: a surround camera rig plus randomly placed
3D boxes, rasterized into per-view feature channels.

Rendering fills the convex hull of each box's projected corners with
constant-depth z-buffering. Channels encode class occupancy, inverse depth,
offset to the projected 3D center (in stride-8 units), and normalized
planar velocity; background stays zero. The task stays non-trivial because
the encoder only ever sees 8x8-pooled versions of these channels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigError, DomainError
from .geometry import (Z_MIN, CameraExtrinsics, CameraIntrinsics, CameraRig,
                       CameraView, box_corners_ego, normalize_angle,
                       project_to_view)

MOVING_SPEED = 0.5  # m/s threshold between the static and moving attribute


@dataclass
class Box3D:
    """Ground-truth object: center, size, yaw about vertical, planar velocity."""

    x: float
    y: float
    z: float
    w: float
    l: float
    h: float
    yaw: float
    vx: float
    vy: float
    class_id: int

    def __post_init__(self):
        if self.w <= 0 or self.l <= 0 or self.h <= 0:
            raise DomainError(f"box dimensions must be positive: {(self.w, self.l, self.h)}")
        self.yaw = normalize_angle(self.yaw)

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    @property
    def speed(self) -> float:
        return float(np.hypot(self.vx, self.vy))

    @property
    def attribute(self) -> str:
        return "moving" if self.speed > MOVING_SPEED else "static"

    def to_json(self) -> dict:
        return {
            "center": [self.x, self.y, self.z],
            "size": [self.w, self.l, self.h],
            "yaw": self.yaw,
            "velocity": [self.vx, self.vy],
            "class_id": self.class_id,
            "attribute": self.attribute,
        }

    @staticmethod
    def from_json(d: dict) -> "Box3D":
        return Box3D(*d["center"], *d["size"], d["yaw"], *d["velocity"], d["class_id"])


@dataclass
class SimConfig:
    n_views: int = 6
    image_width: int = 192
    image_height: int = 128
    n_classes: int = 3
    boxes_per_scene: tuple[int, int] = (2, 10)
    spawn_xy: float = 30.0
    spawn_z: tuple[float, float] = (-0.5, 1.5)
    # per-class (w_lo, w_hi, l_lo, l_hi, h_lo, h_hi)
    size_ranges: tuple[tuple[float, ...], ...] = (
        (1.6, 2.0, 3.5, 5.0, 1.4, 1.8),
        (2.2, 2.8, 6.0, 9.0, 2.5, 3.5),
        (0.5, 0.8, 0.5, 0.8, 1.5, 1.9),
    )
    speed_range: tuple[float, float] = (0.0, 8.0)
    focal_px: float = 137.0
    camera_height: float = 1.6
    camera_radius: float = 1.0

    def __post_init__(self):
        self.boxes_per_scene = tuple(self.boxes_per_scene)
        self.spawn_z = tuple(self.spawn_z)
        self.speed_range = tuple(self.speed_range)
        self.size_ranges = tuple(tuple(r) for r in self.size_ranges)
        if self.n_views < 1:
            raise ConfigError("need at least one view")
        if len(self.size_ranges) != self.n_classes:
            raise ConfigError("size_ranges must cover every class")
        if self.boxes_per_scene[0] > self.boxes_per_scene[1]:
            raise ConfigError("degenerate boxes_per_scene range")
        for r in self.size_ranges:
            if len(r) != 6 or any(r[i] > r[i + 1] for i in (0, 2, 4)) or r[0] <= 0:
                raise ConfigError(f"bad size range {r}")

    @property
    def n_channels(self) -> int:
        """Class one-hot + inverse depth + center offset (2) + velocity (2)."""
        return self.n_classes + 5


def build_surround_rig(config: SimConfig) -> CameraRig:
    """M identical cameras spaced 360/M degrees apart, looking outward."""
    w, h = config.image_width, config.image_height
    k = np.array([
        [config.focal_px, 0.0, (w - 1) / 2.0],
        [0.0, config.focal_px, (h - 1) / 2.0],
        [0.0, 0.0, 1.0],
    ])
    views = []
    for j in range(config.n_views):
        phi = 2.0 * np.pi * j / config.n_views
        c, s = np.cos(phi), np.sin(phi)
        t = np.eye(4)
        # camera axes in ego coordinates: x right, y down, z out along azimuth
        t[:3, 0] = (s, -c, 0.0)
        t[:3, 1] = (0.0, 0.0, -1.0)
        t[:3, 2] = (c, s, 0.0)
        t[:3, 3] = (config.camera_radius * c, config.camera_radius * s,
                    config.camera_height)
        views.append(CameraView(CameraIntrinsics(k), CameraExtrinsics(t), w, h))
    return CameraRig(tuple(views))


class Scene:
    """One sample: rig, ground-truth boxes, and lazily rendered view channels."""

    def __init__(self, rig: CameraRig, boxes: list[Box3D], seed: int,
                 config: SimConfig, scene_id: str = ""):
        self.rig = rig
        self.boxes = boxes
        self.seed = seed
        self.config = config
        self.scene_id = scene_id or str(seed)
        self._images: list[np.ndarray] | None = None

    @property
    def images(self) -> list[np.ndarray]:
        if self._images is None:
            self._images = [render_view(self, j) for j in range(len(self.rig))]
        return self._images

    def release_images(self) -> None:
        """Drop the render cache; rendering is deterministic so a later
        access rebuilds identical channels."""
        self._images = None

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "scene_id": self.scene_id,
            "config": asdict(self.config),
            "rig": self.rig.to_json(),
            "boxes": [b.to_json() for b in self.boxes],
        }

    @staticmethod
    def from_json(doc: dict) -> "Scene":
        cfg = SimConfig(**doc["config"])
        rig = CameraRig.from_json(doc["rig"])
        boxes = [Box3D.from_json(b) for b in doc["boxes"]]
        return Scene(rig, boxes, int(doc["seed"]), cfg, doc.get("scene_id", ""))


def save_scene(scene: Scene, path) -> None:
    with open(path, "w") as fh:
        json.dump(scene.to_json(), fh)


def load_scene(path) -> Scene:
    with open(path) as fh:
        return Scene.from_json(json.load(fh))


def sample_scene(config: SimConfig, seed: int) -> Scene:
    """Draw a scene deterministically from (config, seed).

    Boxes are uniform over the spawn region; velocity points along the
    heading so moving objects carry their yaw in the velocity channels.
    """
    rng = np.random.default_rng(seed)
    rig = build_surround_rig(config)
    lo, hi = config.boxes_per_scene
    n = int(rng.integers(lo, hi + 1))
    boxes = []
    for _ in range(n):
        class_id = int(rng.integers(0, config.n_classes))
        r = config.size_ranges[class_id]
        x = rng.uniform(-config.spawn_xy, config.spawn_xy)
        y = rng.uniform(-config.spawn_xy, config.spawn_xy)
        z = rng.uniform(*config.spawn_z)
        w = rng.uniform(r[0], r[1])
        length = rng.uniform(r[2], r[3])
        h = rng.uniform(r[4], r[5])
        yaw = rng.uniform(-np.pi, np.pi)
        speed = rng.uniform(*config.speed_range)
        boxes.append(Box3D(x, y, z, w, length, h, yaw,
                           speed * np.cos(yaw), speed * np.sin(yaw), class_id))
    return Scene(rig, boxes, seed, config)


def _convex_hull(points: np.ndarray) -> np.ndarray:
    """Monotone-chain convex hull, counterclockwise. Input (N, 2)."""
    pts = points[np.lexsort((points[:, 1], points[:, 0]))]
    pts = np.unique(pts, axis=0)
    if len(pts) < 3:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def _fill_hull(points: np.ndarray, width: int, height: int) -> tuple[np.ndarray, tuple[int, int]] | None:
    """Boolean mask of integer pixels inside the hull of ``points``.

    Returns (mask, (x0, y0)) for the image-clipped window, or None when the
    hull is degenerate or misses the image entirely. Edges are inclusive.
    """
    hull = _convex_hull(points)
    if len(hull) < 3:
        return None
    x0 = max(0, int(np.ceil(hull[:, 0].min() - 1e-9)))
    x1 = min(width - 1, int(np.floor(hull[:, 0].max() + 1e-9)))
    y0 = max(0, int(np.ceil(hull[:, 1].min() - 1e-9)))
    y1 = min(height - 1, int(np.floor(hull[:, 1].max() + 1e-9)))
    if x1 < x0 or y1 < y0:
        return None
    xs, ys = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1))
    inside = np.ones(xs.shape, dtype=bool)
    for i in range(len(hull)):
        ax, ay = hull[i]
        bx, by = hull[(i + 1) % len(hull)]
        inside &= (bx - ax) * (ys - ay) - (by - ay) * (xs - ax) >= -1e-9
    return inside, (x0, y0)


def render_view(scene: Scene, view: int) -> np.ndarray:
    """Rasterize one view into (C, H, W) channels with constant-depth z-buffering.

    Each box paints the filled convex hull of its projected corners at its
    center's camera depth; boxes whose center sits at or behind the near plane
    contribute nothing.
    """
    cfg = scene.config
    w, h = cfg.image_width, cfg.image_height
    img = np.zeros((cfg.n_channels, h, w))
    zbuf = np.full((h, w), np.inf)
    v_norm = max(cfg.speed_range[1], 1e-9)
    for box in scene.boxes:
        u_c, v_c, d_c, _ = project_to_view(box.center, view, scene.rig)
        if d_c <= Z_MIN:
            continue
        pts = []
        for corner in box_corners_ego(box):
            u, v, d, _ = project_to_view(corner, view, scene.rig)
            if d > Z_MIN:
                pts.append((u, v))
        if len(pts) < 3:
            continue
        filled = _fill_hull(np.array(pts), w, h)
        if filled is None:
            continue
        mask, (x0, y0) = filled
        win = (slice(y0, y0 + mask.shape[0]), slice(x0, x0 + mask.shape[1]))
        closer = mask & (d_c < zbuf[win])
        if not closer.any():
            continue
        zbuf[win][closer] = d_c
        ys, xs = np.nonzero(closer)
        ys = ys + y0
        xs = xs + x0
        for c in range(cfg.n_classes):
            img[c, ys, xs] = 1.0 if c == box.class_id else 0.0
        img[cfg.n_classes, ys, xs] = min(1.0, 1.0 / d_c)
        img[cfg.n_classes + 1, ys, xs] = (u_c - xs) / 8.0
        img[cfg.n_classes + 2, ys, xs] = (v_c - ys) / 8.0
        img[cfg.n_classes + 3, ys, xs] = box.vx / v_norm
        img[cfg.n_classes + 4, ys, xs] = box.vy / v_norm
    return img


def gt_2d_box(box: Box3D, view: int, rig: CameraRig) -> tuple[float, float, float, float] | None:
    """Axis-aligned hull of the box's in-front projected corners, clipped to
    the image. None when fewer than two corners project or the hull misses
    the image entirely.
    """
    cam = rig.views[view]
    pts = []
    for corner in box_corners_ego(box):
        u, v, d, _ = project_to_view(corner, view, rig)
        if d > Z_MIN:
            pts.append((u, v))
    if len(pts) < 2:
        return None
    arr = np.array(pts)
    u_min, v_min = arr.min(axis=0)
    u_max, v_max = arr.max(axis=0)
    if u_max < 0 or v_max < 0 or u_min > cam.width - 1 or v_min > cam.height - 1:
        return None
    return (max(0.0, float(u_min)), max(0.0, float(v_min)),
            min(float(cam.width - 1), float(u_max)),
            min(float(cam.height - 1), float(v_max)))
