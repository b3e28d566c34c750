"""Full two-stage model: parameter construction, the training forward pass
(stage-1 dense losses + per-layer set losses with consistency machinery),
and inference decoding into detection records.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import losses
from .config import RunConfig
from .detection_head import (LayerOutput, RefineLayerParams, decode_boxes,
                             init_refine_layer, run_refinement)
from .encoder import N_LEVELS, EncoderParams, encode, init_encoder_params
from .errors import ConfigError
from .evaluate import DetectionRecord
from .proposal_head import (DenseHeadOutput, DenseTargets, LevelAssignSpec,
                            Proposal, PyramidLayout, assign_dense_targets,
                            build_proposals, dense_forward, init_embed_params,
                            init_proposal_head, objectness, select_proposals)
from .scene_sim import Scene


@dataclass
class QueryBank:
    """Learnable fixed queries: feature vectors plus reference positions."""

    features: ad.Tensor   # (C, N)
    positions: ad.Tensor  # (3, N)

    def named(self) -> dict[str, ad.Tensor]:
        return {"query_bank.features": self.features,
                "query_bank.positions": self.positions}


@dataclass
class ForwardResult:
    dense: DenseHeadOutput
    targets: DenseTargets
    proposals: list[Proposal]
    layer_outputs: list[LayerOutput]
    l_pro: ad.Tensor
    pro_components: dict[str, float]
    det_losses: list[ad.Tensor]
    det_components: list[dict[str, float]]
    total: ad.Tensor
    teacher_forced: bool
    filtered_targets: list[int]


class Model:
    """Owns all parameters and runs the end-to-end pipeline on one scene."""

    def __init__(self, config: RunConfig):
        self.config = config
        sim, mc = config.sim, config.model
        if sim.image_width % 64 or sim.image_height % 64:
            raise ConfigError("image size must divide by 64 for the pyramid")
        self.layout = PyramidLayout(sim.n_views, sim.image_width, sim.image_height)
        e = mc.level_range_edges
        self.assign_spec = LevelAssignSpec(
            ranges=((0.0, e[0]), (e[0], e[1]), (e[1], e[2]), (e[2], float("inf"))),
            radius=mc.assign_radius, sigma_c=mc.assign_sigma)
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xC0FFEE]))
        self.encoder = init_encoder_params(sim.n_channels, mc.hidden, mc.channels, rng)
        self.head = init_proposal_head(sim.n_classes, mc.channels, rng)
        self.embed = init_embed_params(sim.n_views, mc.channels, rng)
        self.embed.r_max = mc.r_max
        self.layers = [init_refine_layer(mc.channels, sim.n_classes, mc.n_heads, rng)
                       for _ in range(mc.n_layers)]
        self.bank: QueryBank | None = None
        if config.modes.fixed_queries:
            pos = np.vstack([
                rng.uniform(-sim.spawn_xy, sim.spawn_xy, size=(2, mc.n_pro)),
                rng.uniform(sim.spawn_z[0], sim.spawn_z[1], size=(1, mc.n_pro)),
            ])
            self.bank = QueryBank(
                features=ad.parameter((mc.channels, mc.n_pro), rng, scale_=0.02),
                positions=ad.Tensor(pos, requires_grad=True))

    def named_params(self) -> dict[str, ad.Tensor]:
        out: dict[str, ad.Tensor] = {}
        out.update(self.encoder.named())
        out.update(self.head.named())
        out.update(self.embed.named())
        for i, layer in enumerate(self.layers):
            out.update(layer.named(i))
        if self.bank is not None:
            out.update(self.bank.named())
        return out

    # ------------------------------------------------------------------
    # shared plumbing

    def _objectness_maps(self, dense: DenseHeadOutput) -> dict[tuple[int, int], np.ndarray]:
        """Detached per-(view, level) objectness maps for selection."""
        obj = objectness(ad.Tensor(dense.p_cls.data),
                         ad.Tensor(dense.p_ctr.data[0])).data
        maps = {}
        for view in range(self.layout.n_views):
            for level in range(N_LEVELS):
                start, cells = self.layout.view_slice(view, level)
                h, w = self.layout.sizes[level]
                maps[(view, level)] = obj[start:start + cells].reshape(h, w)
        return maps

    def _stage_one(self, scene: Scene, with_aux: bool):
        pyramids = encode(scene.images, self.encoder)
        dense = dense_forward(pyramids, self.head, self.layout, with_aux=with_aux)
        return pyramids, dense

    def _select_and_build(self, dense, maps, rig) -> tuple[list[Proposal], ad.Tensor | None]:
        mc = self.config.model
        sels = select_proposals(maps, mc.n_pro, mc.score_min,
                                use_peaks=not self.config.modes.disable_center_nms)
        return build_proposals(sels, dense, rig, self.head)

    # ------------------------------------------------------------------

    def forward_train(self, scene: Scene, tf_prob: float,
                      tf_rng: np.random.Generator,
                      pinned_positions: list[np.ndarray] | None = None,
                      force_teacher: bool | None = None) -> ForwardResult:
        """Full training pass on one scene; returns every loss component.

        ``pinned_positions`` and ``force_teacher`` freeze the detached
        quantities for finite-difference probes (positions are a stop-
        gradient path, and the teacher-forcing draw must not be resampled).
        """
        cfg = self.config
        mc = cfg.model
        with_aux = not cfg.modes.disable_aux
        pyramids, dense = self._stage_one(scene, with_aux)
        targets = assign_dense_targets(scene, self.layout, self.assign_spec)
        l_pro, pro_components = losses.proposal_loss(dense, targets, with_aux=with_aux)

        teacher_forced = False
        position_tensor = None
        if cfg.modes.fixed_queries:
            proposals: list[Proposal] = []
            feats = self.bank.features
            positions = self.bank.positions.data.copy()
            views = levels = None
            position_tensor = self.bank.positions
            filtered = list(range(len(scene.boxes)))
        else:
            maps = self._objectness_maps(dense)
            if not cfg.modes.disable_teacher_forcing:
                if force_teacher is None:
                    maps, teacher_forced = losses.teacher_forcing(
                        maps, targets.objectness_maps(), tf_prob, tf_rng)
                elif force_teacher:
                    maps, teacher_forced = targets.objectness_maps(), True
            proposals, feats = self._select_and_build(dense, maps, scene.rig)
            if not proposals:
                total = losses.total_loss(l_pro, [], mc.lambda_pro)
                return ForwardResult(dense, targets, [], [], l_pro, pro_components,
                                     [], [], total, teacher_forced, [])
            positions = np.stack([p.position for p in proposals], axis=1)
            views = np.array([p.view for p in proposals])
            levels = np.array([p.level for p in proposals])
            if cfg.modes.disable_target_filtering:
                filtered = list(range(len(scene.boxes)))
            else:
                filtered = losses.target_filtering(proposals, scene)

        layer_outputs = run_refinement(
            feats, positions, views, levels, pyramids, scene.rig, self.layers,
            self.embed, refresh_encodings=mc.refresh_encodings,
            position_tensor=position_tensor, pinned_positions=pinned_positions)

        boxes_f = [scene.boxes[i] for i in filtered]
        det_losses = []
        det_components = []
        for out in layer_outputs:
            term, cls_val, box_val, _ = losses.set_loss(
                out, boxes_f, cfg.sim.n_classes, mc.no_object_weight)
            det_losses.append(term)
            det_components.append({"cls": cls_val, "box": box_val})
        total = losses.total_loss(l_pro, det_losses, mc.lambda_pro)
        return ForwardResult(dense, targets, proposals, layer_outputs, l_pro,
                             pro_components, det_losses, det_components, total,
                             teacher_forced, filtered)

    def forward_infer(self, scene: Scene) -> list[DetectionRecord]:
        """Inference: last-layer decode only; no teacher forcing, no target
        filtering, no auxiliary branches."""
        cfg = self.config
        pyramids, dense = self._stage_one(scene, with_aux=False)
        if cfg.modes.fixed_queries:
            feats = self.bank.features
            positions = self.bank.positions.data.copy()
            views = levels = None
        else:
            maps = self._objectness_maps(dense)
            proposals, feats = self._select_and_build(dense, maps, scene.rig)
            if not proposals:
                return []
            positions = np.stack([p.position for p in proposals], axis=1)
            views = np.array([p.view for p in proposals])
            levels = np.array([p.level for p in proposals])
        outs = run_refinement(feats, positions, views, levels, pyramids,
                              scene.rig, self.layers, self.embed,
                              refresh_encodings=cfg.model.refresh_encodings)
        last = outs[-1]
        decoded = decode_boxes(last.reg.data, last.pre_positions)
        z = last.logits.data - last.logits.data.max(axis=0)
        probs = np.exp(z) / np.exp(z).sum(axis=0)
        n_c = cfg.sim.n_classes
        records = []
        for i in range(last.logits.shape[1]):
            cls = int(np.argmax(probs[:n_c, i]))
            records.append(DetectionRecord(
                scene.scene_id, cls, decoded["center"][:, i], decoded["size"][:, i],
                float(decoded["yaw"][i]), decoded["velocity"][:, i],
                float(probs[cls, i])))
        return records
