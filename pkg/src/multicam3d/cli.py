"""Command-line shell: dataset generation, training, evaluation, inference,
BEV plots, ablation presets, and the gradient-check suite.

Errors from known failure modes exit nonzero with a one-line JSON object on
stderr.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys

import numpy as np

from . import autodiff as ad
from .bev import render_bev
from .config import RunConfig, load_run_config, run_config_from_dict, save_run_config
from .errors import ConfigError, ContractError, DomainError, ShapeError
from . import gradcheck as gradcheck_mod
from .evaluate import (DetectionRecord, evaluate, gt_records_from_scene,
                       read_detections_jsonl, write_detections_jsonl)
from .losses import CALL_COUNTS
from .model import Model
from .scene_sim import Scene, load_scene, sample_scene, save_scene
from .train import load_model, train

KNOWN_ERRORS = (ConfigError, ContractError, DomainError, ShapeError,
                FileNotFoundError, NotADirectoryError, json.JSONDecodeError)


class _JsonArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        json.dump({"error": "UsageError", "message": message}, sys.stderr)
        sys.stderr.write("\n")
        raise SystemExit(2)


def _load_config(args) -> RunConfig:
    config = load_run_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    return config


def _scene_paths(scene_dir, split: str) -> list[str]:
    manifest = os.path.join(scene_dir, f"{split}_manifest.json")
    with open(manifest) as fh:
        names = json.load(fh)
    return [os.path.join(scene_dir, name) for name in names]


def _load_scenes(scene_dir, split: str) -> list[Scene]:
    return [load_scene(p) for p in _scene_paths(scene_dir, split)]


def cmd_generate(args) -> int:
    config = _load_config(args)
    os.makedirs(args.out, exist_ok=True)
    manifests = {}
    offset = 0
    for split, count in (("train", args.scenes), ("val", args.val_scenes)):
        split_dir = os.path.join(args.out, split)
        os.makedirs(split_dir, exist_ok=True)
        names = []
        for i in range(count):
            scene = sample_scene(config.sim, config.seed + offset + i)
            scene.scene_id = f"{split}_{i:05d}"
            name = os.path.join(split, f"{i:05d}.json")
            save_scene(scene, os.path.join(args.out, name))
            names.append(name)
        manifests[split] = names
        offset += count
        with open(os.path.join(args.out, f"{split}_manifest.json"), "w") as fh:
            json.dump(names, fh, indent=0)
    save_run_config(config, os.path.join(args.out, "config.json"))
    print(f"wrote {args.scenes} train + {args.val_scenes} val scenes to {args.out}")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args)
    scenes = _load_scenes(args.scenes, "train")
    summary = train(config, scenes, args.out)
    save_run_config(config, os.path.join(args.out, "config.json"))
    print(json.dumps(summary))
    return 0


def _run_inference(model: Model, scenes: list[Scene]) -> list[DetectionRecord]:
    preds: list[DetectionRecord] = []
    for scene in scenes:
        preds.extend(model.forward_infer(scene))
        scene.release_images()
    return preds


def cmd_eval(args) -> int:
    config = _load_config(args)
    scenes = _load_scenes(args.scenes, args.split)
    model = load_model(config, args.checkpoint)
    counts_before = dict(CALL_COUNTS)
    preds = _run_inference(model, scenes)
    assert CALL_COUNTS == counts_before, "inference touched training-only machinery"
    gts = [r for scene in scenes for r in gt_records_from_scene(scene)]
    report = evaluate(preds, gts, config.eval)
    os.makedirs(args.out, exist_ok=True)
    write_detections_jsonl(os.path.join(args.out, "predictions.jsonl"), preds)
    with open(os.path.join(args.out, "metrics.json"), "w") as fh:
        json.dump(report.to_json(), fh, indent=2)
    with open(os.path.join(args.out, "metrics.csv"), "w") as fh:
        fh.write(report.to_csv())
    print(report.to_csv().strip())
    return 0


def cmd_infer(args) -> int:
    config = _load_config(args)
    scenes = _load_scenes(args.scenes, args.split)
    model = load_model(config, args.checkpoint)
    preds = _run_inference(model, scenes)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    write_detections_jsonl(args.out, preds)
    print(f"wrote {len(preds)} detections to {args.out}")
    return 0


def cmd_render_bev(args) -> int:
    scene = load_scene(args.scene)
    preds = read_detections_jsonl(args.predictions) if args.predictions else []
    preds = [p for p in preds if p.scene_id == scene.scene_id]
    render_bev(scene, preds, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    return 0 if gradcheck_mod.run_all(verbose=True) else 1


ABLATION_PRESETS = {
    "queries_vs_proposals": [
        ("fixed_queries", {"modes": {"fixed_queries": True}}),
        ("proposals", {}),
    ],
    "center_nms": [
        ("no_center_nms", {"modes": {"disable_center_nms": True}}),
        ("center_nms", {}),
    ],
    "aux_branches": [
        ("no_aux", {"modes": {"disable_aux": True}}),
        ("aux", {}),
    ],
    "consistency": [
        ("neither", {"modes": {"disable_target_filtering": True,
                               "disable_teacher_forcing": True}}),
        ("filter_only", {"modes": {"disable_teacher_forcing": True}}),
        ("teacher_only", {"modes": {"disable_target_filtering": True}}),
        ("both", {}),
    ],
    "proposal_count_sweep": [
        (f"n_pro_{n}", {"model": {"n_pro": n}}) for n in (25, 50, 100, 200)
    ],
}


def _merged_config(base: RunConfig, patch: dict) -> RunConfig:
    doc = dataclasses.asdict(base)
    for section, values in patch.items():
        doc[section].update(values)
    return run_config_from_dict(doc)


def cmd_ablate(args) -> int:
    base = _load_config(args)
    variants = ABLATION_PRESETS[args.preset]
    train_scenes = _load_scenes(args.scenes, "train")
    val_scenes = _load_scenes(args.scenes, "val")
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for name, patch in variants:
        config = _merged_config(base, patch)
        run_dir = os.path.join(args.out, name)
        if args.preset == "proposal_count_sweep" and args.checkpoint:
            # evaluation-time sweep over an already trained default model
            model = load_model(config, args.checkpoint)
        else:
            summary = train(config, train_scenes, run_dir)
            model = load_model(config, summary["checkpoint"])
        preds = _run_inference(model, val_scenes)
        gts = [r for s in val_scenes for r in gt_records_from_scene(s)]
        report = evaluate(preds, gts, config.eval)
        rows.append({"variant": name, "NDS": report.nds, "mAP": report.mean_ap,
                     "mATE": report.mate, "mASE": report.mase,
                     "mAOE": report.maoe, "mAVE": report.mave,
                     "mAAE": report.maae})
        print(f"{name}: NDS={report.nds:.4f} mAP={report.mean_ap:.4f}")
    csv_path = os.path.join(args.out, "ablation.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {csv_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _JsonArgumentParser(prog="multicam3d")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", default=None, help="RunConfig JSON path")
        if seed:
            p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("generate", help="write synthetic scene files")
    common(p)
    p.add_argument("--scenes", type=int, default=200)
    p.add_argument("--val-scenes", type=int, default=50)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("train", help="train on generated scenes")
    common(p)
    p.add_argument("--scenes", required=True, help="scene directory")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("infer", help="write predictions without metrics")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("render-bev", help="top-down SVG of a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--predictions", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_render_bev)

    p = sub.add_parser("ablate", help="train and compare preset variants")
    common(p)
    p.add_argument("--preset", choices=sorted(ABLATION_PRESETS), required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--checkpoint", default=None,
                   help="reuse a trained model (proposal_count_sweep only)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference verification suite")
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except KNOWN_ERRORS as exc:
        json.dump({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
