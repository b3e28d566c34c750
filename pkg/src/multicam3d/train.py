"""Training loop: batch-size-1 AdamW over scenes with step-decayed learning
rate, a linearly decaying teacher-forcing probability, per-step JSONL loss
logging, and epoch checkpoints.
"""

from __future__ import annotations

import json
import math
import os

import numpy as np

from . import autodiff as ad
from .config import RunConfig
from .errors import ContractError
from .losses import LossReport
from .model import Model
from .scene_sim import Scene


class TrainingDiverged(ContractError):
    """Raised when the loss goes NaN; the offending report is attached."""

    def __init__(self, report: LossReport):
        super().__init__(f"NaN loss at step {report.step}")
        self.report = report


def lr_at(step: int, total_steps: int, base_lr: float,
          milestones: tuple[float, ...], factor: float,
          warmup_frac: float = 0.0) -> float:
    """Step-decayed learning rate with optional linear warmup: ramps from 0
    over the first ``warmup_frac`` of steps, then multiplies by ``factor`` at
    each milestone fraction of the total step budget."""
    warmup_steps = int(warmup_frac * total_steps)
    scale = min(1.0, (step + 1) / warmup_steps) if warmup_steps > 0 else 1.0
    crossed = sum(1 for frac in milestones if step >= int(frac * total_steps))
    return base_lr * scale * factor ** crossed


def clip_gradients(params: dict, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``.
    Returns the pre-clip norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


def teacher_forcing_prob(step: int, total_steps: int, start: float, end: float,
                         disabled: bool) -> float:
    if disabled or total_steps <= 1:
        return 0.0 if disabled else start
    t = step / max(1, total_steps - 1)
    return start + (end - start) * t


def train(config: RunConfig, scenes: list[Scene], out_dir,
          checkpoint_every_epoch: bool = True) -> dict:
    """Run the full training schedule; returns a summary dict.

    Writes ``train_log.jsonl`` (one LossReport per step) and
    ``checkpoint.json`` (final, with optimizer state) under ``out_dir``.
    Fully deterministic given (config, scenes).
    """
    os.makedirs(out_dir, exist_ok=True)
    model = Model(config)
    params = model.named_params()
    oc = config.optim
    opt = ad.AdamW(params, lr=oc.lr, betas=(oc.beta1, oc.beta2), eps=oc.eps,
                   weight_decay=oc.weight_decay)
    tf_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x7EAC4]))
    order_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x02DE2]))
    total_steps = oc.epochs * len(scenes)
    log_path = os.path.join(out_dir, "train_log.jsonl")
    step = 0
    last_total = math.nan
    with open(log_path, "w") as log:
        for epoch in range(oc.epochs):
            order = order_rng.permutation(len(scenes))
            for idx in order:
                scene = scenes[idx]
                opt.lr = lr_at(step, total_steps, oc.lr, oc.milestones,
                               oc.decay_factor, oc.warmup_frac)
                tf_prob = teacher_forcing_prob(
                    step, total_steps, config.model.teacher_forcing_start,
                    config.model.teacher_forcing_end,
                    config.modes.disable_teacher_forcing)
                with ad.Graph():
                    result = model.forward_train(scene, tf_prob, tf_rng)
                    total_val = result.total.item()
                    report = LossReport(
                        step=step, epoch=epoch, scene_id=scene.scene_id,
                        lr=opt.lr, proposal_components=result.pro_components,
                        l_pro=result.l_pro.item(),
                        det_layers=result.det_components,
                        filtered_targets=len(result.filtered_targets),
                        n_targets=len(scene.boxes),
                        teacher_forced=result.teacher_forced,
                        n_proposals=len(result.proposals),
                        total=total_val)
                    log.write(json.dumps(report.to_json()) + "\n")
                    if math.isnan(total_val):
                        log.flush()
                        raise TrainingDiverged(report)
                    ad.backward(result.total)
                # parameters the step never reached (no proposals survived, or
                # a mode skips a path) have zero gradient by definition
                for p in params.values():
                    if p.grad is None:
                        p.grad = np.zeros_like(p.data)
                clip_gradients(params, oc.clip_norm)
                opt.step()
                opt.zero_grad()
                scene.release_images()
                step += 1
                last_total = total_val
            if checkpoint_every_epoch:
                ad.save_checkpoint(os.path.join(out_dir, f"checkpoint_epoch{epoch}.json"),
                                   params)
    final_path = os.path.join(out_dir, "checkpoint.json")
    ad.save_checkpoint(final_path, params, opt)
    return {"steps": step, "final_loss": last_total,
            "checkpoint": final_path, "log": log_path}


def load_model(config: RunConfig, checkpoint_path) -> Model:
    model = Model(config)
    arrays, _ = ad.load_checkpoint(checkpoint_path)
    ad.assign_parameters(model.named_params(), arrays)
    return model
