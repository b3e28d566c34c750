"""Second-stage iterative refinement: per layer, proposals aggregate
multi-view image features at their projected positions, interact through
multi-head self-attention, and decode class logits plus a 10-dim box
regression whose (dx, dy, dz) head shifts the proposal positions.

Positions are detached before projection and sampling; position learning is
carried by the residual-regression loss path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .encoder import N_LEVELS, STRIDES, FeaturePyramid
from .errors import ConfigError
from .geometry import Z_MIN, CameraRig, project_points, project_to_view
from .proposal_head import EmbedParams, proposal_encoding

REG_DIM = 10  # (dx, dy, dz, log w, log l, log h, sin yaw, cos yaw, vx, vy)


@dataclass
class RefineLayerParams:
    n_heads: int
    wq: ad.Tensor
    bq: ad.Tensor
    wk: ad.Tensor
    bk: ad.Tensor
    wv: ad.Tensor
    bv: ad.Tensor
    mix_w: ad.Tensor
    mix_b: ad.Tensor
    cls_w: ad.Tensor
    cls_b: ad.Tensor
    reg_w: ad.Tensor
    reg_b: ad.Tensor

    def named(self, index: int) -> dict[str, ad.Tensor]:
        prefix = f"detect.layer{index}."
        return {prefix + k: getattr(self, k)
                for k in ("wq", "bq", "wk", "bk", "wv", "bv", "mix_w", "mix_b",
                          "cls_w", "cls_b", "reg_w", "reg_b")}


def init_refine_layer(channels: int, n_classes: int, n_heads: int,
                      rng: np.random.Generator) -> RefineLayerParams:
    c = channels
    if c % n_heads:
        raise ConfigError(f"channels {c} not divisible by {n_heads} heads")

    def lin(rows, cols):
        return ad.parameter((rows, cols), rng, scale_=1.0 / np.sqrt(cols))

    return RefineLayerParams(
        n_heads=n_heads,
        wq=lin(c, c), bq=ad.parameter(np.zeros(c)),
        wk=lin(c, c), bk=ad.parameter(np.zeros(c)),
        wv=lin(c, c), bv=ad.parameter(np.zeros(c)),
        mix_w=lin(c, c), mix_b=ad.parameter(rng.normal(size=c) * 0.05),
        cls_w=lin(n_classes + 1, c), cls_b=ad.parameter(np.zeros(n_classes + 1)),
        reg_w=lin(REG_DIM, c), reg_b=ad.parameter(np.zeros(REG_DIM)),
    )


def _level_projection(position: np.ndarray, view: int, level: int,
                      rig: CameraRig) -> tuple[float, float, bool]:
    """Level-grid sampling coordinates (u/s, v/s) and their validity."""
    s = STRIDES[level]
    u, v, _, valid = project_to_view(position, view, rig, stride=s)
    return u / s, v / s, valid


def aggregate_features(position: np.ndarray, feature: ad.Tensor,
                       pyramids: list[FeaturePyramid], rig: CameraRig) -> ad.Tensor:
    """Residual mean of validly projected bilinear samples for one proposal.

    f' = f + (1 / sum sigma) * sum sigma * sample(view, level); when no
    projection is valid the feature passes through unchanged.
    """
    samples = []
    for j, pyr in enumerate(pyramids):
        for k in range(N_LEVELS):
            lu, lv, valid = _level_projection(position, j, k, rig)
            if valid:
                samples.append(ad.bilinear_sample(pyr.levels[k], lu, lv))
    if not samples:
        return feature
    stacked = ad.concat([ad.reshape(s, (s.shape[0], 1)) for s in samples], axis=1)
    mean = ad.reduce_mean(stacked, axis=1)
    return ad.add(feature, mean)


def aggregate_features_batch(positions: np.ndarray, features: ad.Tensor,
                             pyramids: list[FeaturePyramid],
                             rig: CameraRig) -> ad.Tensor:
    """Vectorized aggregation over all proposals; equals the per-proposal op."""
    c, n = features.shape
    counts = np.zeros(n)
    total = ad.Tensor(np.zeros((c, n)))
    width = rig.views[0].width
    height = rig.views[0].height
    for j, pyr in enumerate(pyramids):
        us, vs, depths = project_points(positions, j, rig)
        in_front = depths > Z_MIN
        for k in range(N_LEVELS):
            s = STRIDES[k]
            lu = us / s
            lv = vs / s
            ok = (in_front & (lu >= 0.0) & (lu <= width // s - 1)
                  & (lv >= 0.0) & (lv <= height // s - 1))
            if not ok.any():
                continue
            idx = np.nonzero(ok)[0]
            sampled = ad.bilinear_sample_batch(pyr.levels[k], lu[idx], lv[idx])
            total = ad.col_scatter_add(total, sampled, idx)
            counts[idx] += 1.0
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)
    return ad.add(features, ad.hadamard(total, ad.Tensor(inv)))


def self_attention(features: ad.Tensor, encodings: ad.Tensor,
                   layer: RefineLayerParams) -> ad.Tensor:
    """Multi-head residual attention over the proposal set.

    Queries, keys, and values all project from features + encodings; each
    head scales scores by 1/sqrt(d_head). With one head this is the plain
    softmax(Q K^T / sqrt(C)) V interaction.
    """
    c, n = features.shape
    s = ad.add(features, encodings)
    q = ad.linear(layer.wq, s, layer.bq)
    k = ad.linear(layer.wk, s, layer.bk)
    v = ad.linear(layer.wv, s, layer.bv)
    d = c // layer.n_heads
    outs = []
    for h in range(layer.n_heads):
        qh = ad.narrow(q, 0, h * d, d)
        kh = ad.narrow(k, 0, h * d, d)
        vh = ad.narrow(v, 0, h * d, d)
        scores = ad.scale(ad.matmul(ad.transpose(qh), kh), 1.0 / np.sqrt(d))
        attn = ad.softmax(scores, axis=1)
        outs.append(ad.matmul(vh, ad.transpose(attn)))
    return ad.add(features, ad.concat(outs, axis=0))


def decode_and_update(features: ad.Tensor, positions: np.ndarray,
                      layer: RefineLayerParams
                      ) -> tuple[ad.Tensor, ad.Tensor, np.ndarray]:
    """Linear decode into class logits and box regression; positions shift by
    the predicted (dx, dy, dz) residual."""
    logits = ad.linear(layer.cls_w, features, layer.cls_b)
    reg = ad.linear(layer.reg_w, features, layer.reg_b)
    new_positions = positions + reg.data[:3]
    return logits, reg, new_positions


def decode_boxes(reg: np.ndarray, pre_positions: np.ndarray) -> dict[str, np.ndarray]:
    """Full predicted boxes from a (10, N) regression and pre-update positions.

    Sizes come through exp; yaw is atan2(sin, cos) with atan2(0, 0) = 0.
    """
    centers = pre_positions + reg[:3]
    sizes = np.exp(reg[3:6])
    yaws = np.arctan2(reg[6], reg[7])
    velocities = reg[8:10]
    return {"center": centers, "size": sizes, "yaw": yaws, "velocity": velocities}


@dataclass
class LayerOutput:
    logits: ad.Tensor          # (N_c + 1, N)
    reg: ad.Tensor             # (10, N)
    pre_positions: np.ndarray  # (3, N) positions the residuals are relative to
    post_positions: np.ndarray


def run_refinement(features: ad.Tensor, positions: np.ndarray,
                   views, levels, pyramids: list[FeaturePyramid], rig: CameraRig,
                   layers: list[RefineLayerParams], embed: EmbedParams,
                   refresh_encodings: bool = True,
                   position_tensor: ad.Tensor | None = None,
                   pinned_positions: list[np.ndarray] | None = None) -> list[LayerOutput]:
    """Apply aggregate -> mix -> attention -> decode for every layer.

    Encodings are recomputed from the current positions each layer unless
    ``refresh_encodings`` is off, in which case the initial encodings are
    reused. ``position_tensor``, when given, feeds the first encoding so
    learnable reference positions receive gradient through the encoding path.

    ``pinned_positions`` freezes the per-layer pre-update positions to given
    values; positions are a detached (stop-gradient) quantity, so finite-
    difference checks must hold them fixed to probe only the traced paths.
    """
    if not layers:
        raise ConfigError("refinement needs at least one layer")
    outputs: list[LayerOutput] = []
    positions = positions.copy()
    encodings = None
    for i, layer in enumerate(layers):
        if pinned_positions is not None:
            positions = pinned_positions[i].copy()
        if encodings is None or refresh_encodings:
            pos_arg = position_tensor if (i == 0 and position_tensor is not None) else positions
            encodings = proposal_encoding(pos_arg, views, levels, embed)
        aggregated = aggregate_features_batch(positions, features, pyramids, rig)
        mixed = ad.add(aggregated,
                       ad.relu(ad.linear(layer.mix_w, aggregated, layer.mix_b)))
        attended = self_attention(mixed, encodings, layer)
        logits, reg, new_positions = decode_and_update(attended, positions, layer)
        outputs.append(LayerOutput(logits, reg, positions.copy(), new_positions.copy()))
        positions = new_positions
        features = attended
    return outputs
