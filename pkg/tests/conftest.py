"""Shared fixtures and helpers for the test suite."""

import numpy as np
import pytest

from multicam3d.geometry import (CameraExtrinsics, CameraIntrinsics,
                                 CameraRig, CameraView)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_rig(rng: np.random.Generator, n_views: int = 2,
               width: int = 128, height: int = 64) -> CameraRig:
    views = []
    for _ in range(n_views):
        f = rng.uniform(60.0, 200.0)
        k = np.array([
            [f, 0.0, width / 2 + rng.uniform(-3, 3)],
            [0.0, f * rng.uniform(0.9, 1.1), height / 2 + rng.uniform(-3, 3)],
            [0.0, 0.0, 1.0],
        ])
        t = np.eye(4)
        t[:3, :3] = random_rotation(rng)
        t[:3, 3] = rng.uniform(-3.0, 3.0, size=3)
        views.append(CameraView(CameraIntrinsics(k), CameraExtrinsics(t), width, height))
    return CameraRig(tuple(views))


def identity_rig(width: int = 64, height: int = 64, f: float = 1.0,
                 cx: float = 0.0, cy: float = 0.0) -> CameraRig:
    k = np.array([[f, 0.0, cx], [0.0, f, cy], [0.0, 0.0, 1.0]])
    view = CameraView(CameraIntrinsics(k), CameraExtrinsics(np.eye(4)), width, height)
    return CameraRig((view,))


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
