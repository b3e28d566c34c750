"""Multi-scale feature encoder: a per-pixel MLP on the 8x8-pooled input
followed by successive 2x2 average pools, giving strides (8, 16, 32, 64).

The MLP is shared across views and positions, so the whole batch of views
runs as one matrix product over flattened cells.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError

STRIDES = (8, 16, 32, 64)
N_LEVELS = len(STRIDES)


@dataclass
class FeaturePyramid:
    """Per-view maps at strides (8, 16, 32, 64); each (C, H/s, W/s)."""

    levels: list[ad.Tensor]

    def __post_init__(self):
        if len(self.levels) != N_LEVELS:
            raise ConfigError(f"pyramid needs {N_LEVELS} levels, got {len(self.levels)}")


@dataclass
class EncoderParams:
    w1: ad.Tensor
    b1: ad.Tensor
    w2: ad.Tensor
    b2: ad.Tensor
    w3: ad.Tensor
    b3: ad.Tensor

    def named(self) -> dict[str, ad.Tensor]:
        return {f"encoder.{k}": getattr(self, k) for k in ("w1", "b1", "w2", "b2", "w3", "b3")}


def init_encoder_params(c_in: int, hidden: int, c_out: int,
                        rng: np.random.Generator) -> EncoderParams:
    def lin(rows, cols):
        return ad.parameter((rows, cols), rng, scale_=1.0 / np.sqrt(cols))

    def bias(n):
        # small random offsets keep relu pre-activations off the exact kink
        # for all-zero (background) inputs
        return ad.parameter(rng.normal(size=n) * 0.05)

    return EncoderParams(
        w1=lin(hidden, c_in), b1=bias(hidden),
        w2=lin(hidden, hidden), b2=bias(hidden),
        w3=lin(c_out, hidden), b3=bias(c_out),
    )


def pool_input(image: np.ndarray) -> np.ndarray:
    """8x8 mean pooling of a raw (C, H, W) view; stays plain numpy."""
    c, h, w = image.shape
    return image.reshape(c, h // 8, 8, w // 8, 8).mean(axis=(2, 4))


def encode(images: list[np.ndarray], params: EncoderParams) -> list[FeaturePyramid]:
    """Encode all views into feature pyramids with shared parameters.

    The first hidden layer uses a rectified-log activation so depth, which
    enters the pooled channels as a coverage-scaled inverse, becomes a linear
    combination for the later layers; the second hidden layer is a plain
    relu.
    """
    if not images:
        raise ConfigError("encode needs at least one view")
    c_in, h, w = images[0].shape
    if h % 64 or w % 64:
        raise ConfigError(f"image size {w}x{h} must be divisible by 64")
    h8, w8 = h // 8, w // 8
    cells = h8 * w8
    cols = np.concatenate([pool_input(img).reshape(c_in, cells) for img in images], axis=1)
    x = ad.Tensor(cols)
    hid = ad.softlog(ad.linear(params.w1, x, params.b1))
    hid = ad.relu(ad.linear(params.w2, hid, params.b2))
    feat = ad.linear(params.w3, hid, params.b3)
    c_out = feat.shape[0]
    pyramids = []
    for j in range(len(images)):
        level0 = ad.reshape(ad.narrow(feat, 1, j * cells, cells), (c_out, h8, w8))
        levels = [level0]
        for _ in range(N_LEVELS - 1):
            levels.append(ad.avg_pool2d(levels[-1], 2))
        pyramids.append(FeaturePyramid(levels))
    return pyramids
