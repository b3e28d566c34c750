"""Training objectives: the per-layer set-prediction loss over Hungarian
matches, the stage-1 dense losses (focal / BCE / smooth-L1), consistency
machinery (target filtering and teacher forcing), and their combination.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .detection_head import LayerOutput
from .geometry import CameraRig
from .matching import lexicographic_assignment
from .proposal_head import (AUX_BRANCHES, DenseHeadOutput, DenseTargets,
                            Proposal)
from .scene_sim import Box3D, Scene, gt_2d_box

FOCAL_ALPHA = 0.25  # focal loss with gamma fixed at 2
LOG_EPS = 1e-12

# inference-path instrumentation: these must stay untouched during evaluation
CALL_COUNTS = {"teacher_forcing": 0, "target_filtering": 0}


def box_target_vector(box: Box3D, pre_position: np.ndarray) -> np.ndarray:
    """GT box in the 10-dim regression parameterization relative to one slot:
    (center - position, log sizes, sin yaw, cos yaw, velocity)."""
    return np.array([
        box.x - pre_position[0], box.y - pre_position[1], box.z - pre_position[2],
        np.log(box.w), np.log(box.l), np.log(box.h),
        np.sin(box.yaw), np.cos(box.yaw), box.vx, box.vy,
    ])


def match_layer(layer: LayerOutput, boxes: list[Box3D]) -> np.ndarray:
    """Hungarian match of real targets to prediction slots for one layer.

    Cost per (target, slot) is -p(class) + L1 in the 10-dim parameterization,
    with the translation part expressed relative to the slot's pre-update
    position. Padded no-object targets cost zero for every slot and therefore
    stay out of the optimization; they implicitly take the leftover slots.

    Returns a (P, 2) array of (target index, slot index) pairs. Normally every
    target is matched (P = K); if there are more targets than slots, every
    slot is matched and the leftover targets drop out of this layer's loss.
    """
    k = len(boxes)
    if k == 0:
        return np.zeros((0, 2), dtype=int)
    logits = layer.logits.data
    probs = np.exp(logits - logits.max(axis=0)) \
        / np.exp(logits - logits.max(axis=0)).sum(axis=0)
    reg = layer.reg.data
    pos = layer.pre_positions
    n = pos.shape[1]
    centers = np.array([[b.x, b.y, b.z] for b in boxes]).T       # (3, K)
    consts = np.array([box_target_vector(b, np.zeros(3))[3:] for b in boxes]).T  # (7, K)
    resid = centers[:, :, None] - pos[:, None, :]                # (3, K, N)
    l1 = np.abs(resid - reg[:3, None, :]).sum(axis=0)
    l1 += np.abs(consts[:, :, None] - reg[3:, None, :]).sum(axis=0)
    class_ids = np.array([b.class_id for b in boxes])
    cost = -probs[class_ids, :] + l1
    if k <= n:
        slots = lexicographic_assignment(cost)
        return np.stack([np.arange(k), slots], axis=1)
    targets = lexicographic_assignment(cost.T)
    return np.stack([targets, np.arange(n)], axis=1)


def set_loss(layer: LayerOutput, boxes: list[Box3D], n_classes: int,
             no_object_weight: float = 0.1
             ) -> tuple[ad.Tensor, float, float, np.ndarray]:
    """Set-prediction loss for one layer against the (filtered) targets.

    Classification: -log p at the matched class for real targets, and at the
    no-object class with weight ``no_object_weight`` for leftover slots.
    Box: L1 over the 10-dim parameterization on matched slots. Both terms
    divide by the matched-object count (clamped at one).

    Returns (loss, classification value, box value, matched (target, slot)
    pairs).
    """
    n = layer.logits.shape[1]
    pairs = match_layer(layer, boxes)
    norm = float(max(1, len(pairs)))
    log_probs = ad.log_softmax(layer.logits, axis=0)
    terms: list[ad.Tensor] = []
    if len(pairs):
        slots = pairs[:, 1]
        sel = ad.index_select(log_probs, 1, slots)
        onehot = np.zeros((n_classes + 1, len(pairs)))
        for i, (t, _) in enumerate(pairs):
            onehot[boxes[t].class_id, i] = 1.0
        terms.append(ad.scale(ad.reduce_sum(ad.hadamard(sel, ad.Tensor(onehot))), -1.0))
        leftover = np.setdiff1d(np.arange(n), slots)
    else:
        leftover = np.arange(n)
    if leftover.size:
        sel0 = ad.narrow(ad.index_select(log_probs, 1, leftover), 0, n_classes, 1)
        terms.append(ad.scale(ad.reduce_sum(sel0), -no_object_weight))
    cls_term = terms[0] if len(terms) == 1 else ad.add(terms[0], terms[1])
    cls_loss = ad.scale(cls_term, 1.0 / norm)
    if len(pairs):
        slots = pairs[:, 1]
        reg_m = ad.index_select(layer.reg, 1, slots)
        tgt = np.stack([box_target_vector(boxes[t], layer.pre_positions[:, s])
                        for t, s in pairs], axis=1)
        box_loss = ad.scale(ad.reduce_sum(ad.absolute(ad.sub(reg_m, ad.Tensor(tgt)))),
                            1.0 / norm)
        total = ad.add(cls_loss, box_loss)
        return total, cls_loss.item(), box_loss.item(), pairs
    return cls_loss, cls_loss.item(), 0.0, pairs


def _bce(p: ad.Tensor, target: np.ndarray) -> ad.Tensor:
    t = ad.Tensor(target)
    one = ad.Tensor(np.ones_like(target))
    pos = ad.hadamard(t, ad.log(ad.add(p, ad.Tensor(np.full_like(target, LOG_EPS)))))
    neg = ad.hadamard(ad.sub(one, t),
                      ad.log(ad.add(ad.sub(one, p), ad.Tensor(np.full_like(target, LOG_EPS)))))
    return ad.scale(ad.add(pos, neg), -1.0)


def focal_loss(p_cls: ad.Tensor, cls_target: np.ndarray, n_pos: int) -> ad.Tensor:
    """Focal loss over every cell and class, normalized by the positive count.

    -alpha t (1-p)^gamma log(p) - (1-alpha)(1-t) p^gamma log(1-p), with a
    1e-12 floor inside the logs.
    """
    t = ad.Tensor(cls_target)
    one = ad.Tensor(np.ones_like(cls_target))
    eps = ad.Tensor(np.full_like(cls_target, LOG_EPS))
    om_p = ad.sub(one, p_cls)
    pos = ad.hadamard(ad.hadamard(t, ad.hadamard(om_p, om_p)),
                      ad.log(ad.add(p_cls, eps)))
    neg = ad.hadamard(ad.hadamard(ad.sub(one, t), ad.hadamard(p_cls, p_cls)),
                      ad.log(ad.add(om_p, eps)))
    summed = ad.add(ad.scale(pos, FOCAL_ALPHA), ad.scale(neg, 1.0 - FOCAL_ALPHA))
    return ad.scale(ad.reduce_sum(summed), -1.0 / max(1, n_pos))


DEFAULT_BRANCH_WEIGHTS = {
    # depth drives 3D position quality and is the hardest regression at this
    # scale; corners are a 16-channel auxiliary that otherwise dominates
    "depth": 5.0,
    "corners": 0.2,
}


def proposal_loss(dense: DenseHeadOutput, targets: DenseTargets,
                  with_aux: bool = True,
                  branch_weights: dict[str, float] | None = None
                  ) -> tuple[ad.Tensor, dict[str, float]]:
    """Stage-1 loss: focal classification over all cells plus centerness BCE
    and per-branch smooth-L1 over positive cells.

    Pixel-valued branches (offset, 2D box, corners) are compared in
    level-stride units so coarse levels carry comparable weight. Per-branch
    weights rebalance the smooth-L1 terms (reported components stay
    unweighted). With zero positive cells only the classification term
    remains.
    """
    if branch_weights is None:
        branch_weights = DEFAULT_BRANCH_WEIGHTS
    pos_idx = np.nonzero(targets.pos_mask)[0]
    n_pos = int(pos_idx.size)
    components: dict[str, float] = {}
    total = focal_loss(dense.p_cls, targets.cls, n_pos)
    components["focal"] = total.item()

    if n_pos:
        ctr_sel = ad.index_select(dense.p_ctr, 1, pos_idx)
        ctr = ad.scale(ad.reduce_sum(_bce(ctr_sel, targets.ctr[pos_idx][None, :])),
                       1.0 / n_pos)
        components["ctr_bce"] = ctr.item()
        total = ad.add(total, ctr)

        # (pred, target, stride-normalized, extra mask)
        branch_specs = [
            ("offset", dense.offset, targets.offset, True, None),
            ("depth", dense.log_depth, targets.log_depth[None, :], False, None),
        ]
        if with_aux:
            aux_targets = {
                "box2d": (targets.box2d, True, None),
                "corners": (targets.corners, True, targets.corner_mask),
                "rot": (targets.rot, False, None),
                "size3d": (targets.size3d, False, None),
                "velocity": (targets.velocity, False, None),
            }
            for name in AUX_BRANCHES:
                tgt, in_strides, mask = aux_targets[name]
                branch_specs.append((name, dense.aux[name], tgt, in_strides, mask))
        for name, pred, tgt, in_strides, mask in branch_specs:
            idx = pos_idx
            if mask is not None:
                idx = np.nonzero(targets.pos_mask & mask)[0]
                if idx.size == 0:
                    components[name] = 0.0
                    continue
            sel = ad.index_select(pred, 1, idx)
            diff = ad.sub(sel, ad.Tensor(tgt[:, idx]))
            if in_strides:
                diff = ad.hadamard(diff, ad.Tensor(1.0 / targets.stride_per_cell[idx]))
            term = ad.scale(ad.reduce_sum(ad.smooth_l1(diff)), 1.0 / max(1, idx.size))
            components[name] = term.item()
            total = ad.add(total, ad.scale(term, branch_weights.get(name, 1.0)))
    else:
        components["ctr_bce"] = 0.0
    return total, components


def target_filtering(proposals: list[Proposal], scene: Scene) -> list[int]:
    """Indices of GT objects covered by at least one proposal: a proposal
    covers an object when its source pixel lies inside the object's 2D hull
    (inclusive edges) in the proposal's own view. Returns the sorted union.
    """
    CALL_COUNTS["target_filtering"] += 1
    views = sorted({p.view for p in proposals})
    retained: set[int] = set()
    for idx, box in enumerate(scene.boxes):
        for view in views:
            hull = gt_2d_box(box, view, scene.rig)
            if hull is None:
                continue
            u0, v0, u1, v1 = hull
            for prop in proposals:
                if prop.view != view:
                    continue
                u, v = prop.pixel
                if u0 <= u <= u1 and v0 <= v <= v1:
                    retained.add(idx)
                    break
            if idx in retained:
                break
    return sorted(retained)


def teacher_forcing(pred_maps: dict[tuple[int, int], np.ndarray],
                    gt_maps: dict[tuple[int, int], np.ndarray],
                    p: float, rng: np.random.Generator
                    ) -> tuple[dict[tuple[int, int], np.ndarray], bool]:
    """With probability ``p`` (one draw per sample) substitute the ground
    truth objectness maps for the predicted ones."""
    CALL_COUNTS["teacher_forcing"] += 1
    forced = bool(rng.random() < p)
    return (gt_maps if forced else pred_maps), forced


def total_loss(l_pro: ad.Tensor, l_det_layers: list[ad.Tensor],
               lam: float) -> ad.Tensor:
    """lambda * stage-1 loss plus the deep-supervision sum of per-layer
    stage-2 losses."""
    out = ad.scale(l_pro, lam)
    for term in l_det_layers:
        out = ad.add(out, term)
    return out


@dataclass
class LossReport:
    """Per-step scalar record mirrored into the JSONL training log."""

    step: int
    epoch: int
    scene_id: str
    lr: float
    proposal_components: dict[str, float]
    l_pro: float
    det_layers: list[dict[str, float]]
    filtered_targets: int
    n_targets: int
    teacher_forced: bool
    n_proposals: int
    total: float

    def to_json(self) -> dict:
        return {
            "step": self.step,
            "epoch": self.epoch,
            "scene_id": self.scene_id,
            "lr": self.lr,
            "proposal": self.proposal_components,
            "l_pro": self.l_pro,
            "det_layers": self.det_layers,
            "filtered_targets": self.filtered_targets,
            "n_targets": self.n_targets,
            "teacher_forced": self.teacher_forced,
            "n_proposals": self.n_proposals,
            "total": self.total,
        }
