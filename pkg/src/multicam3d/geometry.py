"""Pinhole camera geometry: lifting image points into the ego frame and
projecting ego points back into each camera view.

Conventions: camera frame is x-right, y-down, z-forward (optical axis); the
ego frame is x-forward, y-left, z-up. Extrinsics map camera to ego. Pixel u
runs along image width, v along height.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError

Z_MIN = 0.1  # near-plane depth in meters for projection validity


@dataclass(frozen=True)
class CameraIntrinsics:
    """3x3 pinhole matrix with zero skew."""

    k: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.k, dtype=np.float64)
        object.__setattr__(self, "k", k)
        if k.shape != (3, 3):
            raise DomainError(f"intrinsics must be 3x3, got {k.shape}")
        if k[0, 0] <= 0 or k[1, 1] <= 0:
            raise DomainError("focal lengths must be positive")
        if not np.allclose(k[2], [0.0, 0.0, 1.0], atol=1e-12):
            raise DomainError("intrinsics bottom row must be (0, 0, 1)")

    @property
    def inverse(self) -> np.ndarray:
        return np.linalg.inv(self.k)


@dataclass(frozen=True)
class CameraExtrinsics:
    """4x4 rigid camera-to-ego transform."""

    t: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.float64)
        object.__setattr__(self, "t", t)
        if t.shape != (4, 4):
            raise DomainError(f"extrinsics must be 4x4, got {t.shape}")
        r = t[:3, :3]
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9):
            raise DomainError("extrinsics rotation block is not orthonormal")
        if not np.isclose(np.linalg.det(r), 1.0, atol=1e-9):
            raise DomainError("extrinsics rotation block must have det 1")
        if not np.allclose(t[3], [0.0, 0.0, 0.0, 1.0], atol=1e-12):
            raise DomainError("extrinsics last row must be (0, 0, 0, 1)")

    @property
    def rotation(self) -> np.ndarray:
        return self.t[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.t[:3, 3]

    @property
    def inverse(self) -> np.ndarray:
        """Ego-to-camera transform."""
        r = self.rotation
        out = np.eye(4)
        out[:3, :3] = r.T
        out[:3, 3] = -r.T @ self.translation
        return out


@dataclass(frozen=True)
class CameraView:
    intrinsics: CameraIntrinsics
    extrinsics: CameraExtrinsics
    width: int
    height: int


@dataclass(frozen=True)
class CameraRig:
    """M calibrated views sharing one image size."""

    views: tuple[CameraView, ...]

    def __post_init__(self):
        object.__setattr__(self, "views", tuple(self.views))
        if not self.views:
            raise DomainError("rig needs at least one view")
        w, h = self.views[0].width, self.views[0].height
        if any(v.width != w or v.height != h for v in self.views):
            raise DomainError("all rig views must share one image size")

    def __len__(self) -> int:
        return len(self.views)

    def to_json(self) -> list[dict]:
        return [
            {
                "k": [float(x) for x in v.intrinsics.k.reshape(-1)],
                "t": [float(x) for x in v.extrinsics.t.reshape(-1)],
                "width": v.width,
                "height": v.height,
            }
            for v in self.views
        ]

    @staticmethod
    def from_json(data: list[dict]) -> "CameraRig":
        views = tuple(
            CameraView(
                CameraIntrinsics(np.array(d["k"]).reshape(3, 3)),
                CameraExtrinsics(np.array(d["t"]).reshape(4, 4)),
                int(d["width"]),
                int(d["height"]),
            )
            for d in data
        )
        return CameraRig(views)


def lift_to_ego(view: int, u: float, v: float, du: float, dv: float,
                depth: float, rig: CameraRig) -> np.ndarray:
    """Lift the 2.5D point (u + du, v + dv, depth) of one view into the ego frame.

    The pixel ray is scaled by depth in the camera frame and then moved
    through the camera-to-ego transform.
    """
    if depth <= 0:
        raise DomainError(f"lift requires depth > 0, got {depth}")
    cam = rig.views[view]
    pix = np.array([u + du, v + dv, 1.0])
    p_cam = cam.intrinsics.inverse @ pix * depth
    p_ego_h = cam.extrinsics.t @ np.array([p_cam[0], p_cam[1], p_cam[2], 1.0])
    return p_ego_h[:3] / p_ego_h[3]


def project_to_view(point: np.ndarray, view: int, rig: CameraRig,
                    stride: int = 1) -> tuple[float, float, float, bool]:
    """Project an ego-frame point into one view.

    Returns full-resolution pixel coordinates, camera-frame depth, and a
    validity flag. Valid means depth exceeds the near plane and the pixel,
    divided by ``stride``, lands inside the stride-downsampled grid
    [0, W/stride - 1] x [0, H/stride - 1]. Never raises for bad geometry;
    pixels are only meaningful when the returned depth is positive.
    """
    cam = rig.views[view]
    p = np.asarray(point, dtype=np.float64)
    p_cam = cam.extrinsics.inverse @ np.array([p[0], p[1], p[2], 1.0])
    depth = float(p_cam[2])
    if abs(depth) < 1e-12:
        return 0.0, 0.0, depth, False
    pix = cam.intrinsics.k @ (p_cam[:3] / depth)
    u, v = float(pix[0]), float(pix[1])
    ws = cam.width // stride
    hs = cam.height // stride
    valid = (depth > Z_MIN
             and 0.0 <= u / stride <= ws - 1
             and 0.0 <= v / stride <= hs - 1)
    return u, v, depth, valid


def project_points(points: np.ndarray, view: int, rig: CameraRig
                   ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized projection of (3, N) ego points into one view.

    Returns (us, vs, depths); same math as project_to_view, validity left to
    the caller. Pixels of points at (or numerically near) zero depth are 0.
    """
    cam = rig.views[view]
    pts = np.asarray(points, dtype=np.float64)
    hom = np.vstack([pts, np.ones(pts.shape[1])])
    p_cam = cam.extrinsics.inverse @ hom
    depths = p_cam[2]
    safe = np.where(np.abs(depths) < 1e-12, 1.0, depths)
    pix = cam.intrinsics.k @ (p_cam[:3] / safe)
    us = np.where(np.abs(depths) < 1e-12, 0.0, pix[0])
    vs = np.where(np.abs(depths) < 1e-12, 0.0, pix[1])
    return us, vs, depths


def box_corners_ego(box) -> np.ndarray:
    """The 8 corners of a yawed box, ego frame, in a fixed documented order.

    ``box`` needs x, y, z, w, l, h, yaw attributes. Corner index i uses bit 0
    for the sign along the heading (length) axis, bit 1 for the lateral
    (width) axis, and bit 2 for the vertical axis, with bit set = positive.
    """
    if box.w <= 0 or box.l <= 0 or box.h <= 0:
        raise DomainError(f"box dimensions must be positive: {(box.w, box.l, box.h)}")
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    corners = np.empty((8, 3))
    for i in range(8):
        sx = 0.5 if i & 1 else -0.5
        sy = 0.5 if i & 2 else -0.5
        sz = 0.5 if i & 4 else -0.5
        bx, by, bz = sx * box.l, sy * box.w, sz * box.h
        corners[i] = (box.x + c * bx - s * by,
                      box.y + s * bx + c * by,
                      box.z + bz)
    return corners


def project_box_corners(box, view: int, rig: CameraRig) -> tuple[np.ndarray, np.ndarray]:
    """Project the 8 box corners into one view.

    Returns (pixels, valid): an (8, 2) array of full-resolution pixel pairs
    and an (8,) boolean validity array (near-plane and image-bounds test at
    stride 1).
    """
    corners = box_corners_ego(box)
    pixels = np.zeros((8, 2))
    valid = np.zeros(8, dtype=bool)
    for i, corner in enumerate(corners):
        u, v, _, ok = project_to_view(corner, view, rig)
        pixels[i] = (u, v)
        valid[i] = ok
    return pixels, valid


def yaw_in_camera(yaw: float, view: int, rig: CameraRig) -> float:
    """Express an ego-frame heading angle in the view's camera frame.

    Returns the angle of the heading direction inside the camera's horizontal
    (x-z) plane, measured from the optical axis toward image-right.
    """
    d_ego = np.array([np.cos(yaw), np.sin(yaw), 0.0])
    d_cam = rig.views[view].extrinsics.rotation.T @ d_ego
    return float(np.arctan2(d_cam[0], d_cam[2]))


def normalize_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    wrapped = float(np.arctan2(np.sin(theta), np.cos(theta)))
    if wrapped == -np.pi:
        wrapped = np.pi
    return wrapped
