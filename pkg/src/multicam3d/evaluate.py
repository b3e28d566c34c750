"""Detection evaluation: distance-thresholded average precision, the five
true-positive error metrics, and their weighted composite score.

Conventions (documented, config-overridable): matching uses planar center
distance with thresholds {0.5, 1, 2, 4} m for AP and 2 m for the TP metrics;
AP integrates the 101-point interpolated precision-recall curve above the
(0.1, 0.1) operating point; classes without ground truth are excluded from
means; classes without true positives contribute the worst value 1 to each
TP metric.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import normalize_angle
from .scene_sim import MOVING_SPEED, Scene


@dataclass
class DetectionRecord:
    scene_id: str
    class_id: int
    center: np.ndarray          # (3,) ego meters
    size: np.ndarray            # (3,) (w, l, h)
    yaw: float
    velocity: np.ndarray        # (2,)
    score: float = 1.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.size = np.asarray(self.size, dtype=np.float64)
        self.velocity = np.asarray(self.velocity, dtype=np.float64)
        self.yaw = normalize_angle(float(self.yaw))

    @property
    def attribute(self) -> str:
        return "moving" if float(np.hypot(*self.velocity)) > MOVING_SPEED else "static"

    def to_json(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "class_id": int(self.class_id),
            "center": [float(x) for x in self.center],
            "size": [float(x) for x in self.size],
            "yaw": float(self.yaw),
            "velocity": [float(x) for x in self.velocity],
            "score": float(self.score),
        }

    @staticmethod
    def from_json(d: dict) -> "DetectionRecord":
        return DetectionRecord(d["scene_id"], d["class_id"], d["center"],
                               d["size"], d["yaw"], d["velocity"],
                               d.get("score", 1.0))


def gt_records_from_scene(scene: Scene) -> list[DetectionRecord]:
    return [DetectionRecord(scene.scene_id, b.class_id, b.center,
                            np.array([b.w, b.l, b.h]), b.yaw,
                            np.array([b.vx, b.vy])) for b in scene.boxes]


def write_detections_jsonl(path, records: list[DetectionRecord]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json()) + "\n")


def read_detections_jsonl(path) -> list[DetectionRecord]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(DetectionRecord.from_json(json.loads(line)))
    return out


@dataclass(frozen=True)
class EvalConfig:
    dist_thresholds: tuple[float, ...] = (0.5, 1.0, 2.0, 4.0)
    tp_threshold: float = 2.0


def _planar_dist(a: DetectionRecord, b: DetectionRecord) -> float:
    return float(np.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1]))


def greedy_match(preds: list[DetectionRecord], gts: list[DetectionRecord],
                 threshold: float) -> tuple[list[tuple[DetectionRecord, DetectionRecord]], list[bool]]:
    """Confidence-ordered greedy matching of one class.

    Predictions are visited in descending score (stable in insertion order on
    ties); each takes the nearest unmatched same-scene ground truth within
    the planar distance threshold. Returns the matched pairs and a per-
    prediction true-positive flag aligned with the score ordering.
    """
    order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
    taken = [False] * len(gts)
    pairs = []
    tp_flags = []
    for i in order:
        p = preds[i]
        best, best_d = -1, np.inf
        for g_idx, g in enumerate(gts):
            if taken[g_idx] or g.scene_id != p.scene_id:
                continue
            d = _planar_dist(p, g)
            if d <= threshold and d < best_d:
                best, best_d = g_idx, d
        if best >= 0:
            taken[best] = True
            pairs.append((p, gts[best]))
            tp_flags.append(True)
        else:
            tp_flags.append(False)
    return pairs, tp_flags


def average_precision(preds: list[DetectionRecord], gts: list[DetectionRecord],
                      class_id: int, dist_threshold: float) -> float | None:
    """AP of one class at one matching threshold.

    Integrates the 101-point interpolated precision-recall curve, keeping
    only recall > 0.1 and precision above 0.1:
    AP = mean(clip(precision - 0.1, 0, 1)) / 0.9 over the grid points
    0.11 .. 1.00. Interpolation is linear between consecutive curve points in
    prediction order, constant before the first point, zero beyond the last,
    and where several points share one recall value the last one wins.
    None when the class has no ground truth (excluded from means); 0 when
    there are no predictions.
    """
    cls_gts = [g for g in gts if g.class_id == class_id]
    if not cls_gts:
        return None
    cls_preds = [p for p in preds if p.class_id == class_id]
    if not cls_preds:
        return 0.0
    _, tp_flags = greedy_match(cls_preds, cls_gts, dist_threshold)
    tp = np.cumsum(np.asarray(tp_flags, dtype=np.float64))
    fp = np.cumsum(~np.asarray(tp_flags))
    prec = tp / np.maximum(tp + fp, 1e-12)
    rec = tp / len(cls_gts)
    grid = np.linspace(0.0, 1.0, 101)
    prec_interp = np.interp(grid, rec, prec, right=0.0)
    return float(np.mean(np.clip(prec_interp[11:] - 0.1, 0.0, 1.0)) / 0.9)


def tp_metrics(pairs: list[tuple[DetectionRecord, DetectionRecord]]
               ) -> tuple[float, float, float, float, float]:
    """(ATE, ASE, AOE, AVE, AAE) over matched true-positive pairs.

    ATE: mean planar center distance. ASE: 1 - volume IoU of the size boxes
    after aligning centers and yaw. AOE: mean absolute yaw difference wrapped
    to [0, pi]. AVE: mean L2 velocity error. AAE: 1 - attribute accuracy.
    Without any pair every metric takes the worst value 1.
    """
    if not pairs:
        return (1.0, 1.0, 1.0, 1.0, 1.0)
    ate = float(np.mean([_planar_dist(p, g) for p, g in pairs]))
    ious = []
    for p, g in pairs:
        inter = float(np.prod(np.minimum(p.size, g.size)))
        union = float(np.prod(p.size) + np.prod(g.size) - inter)
        ious.append(inter / union)
    ase = float(1.0 - np.mean(ious))
    aoe = float(np.mean([abs(normalize_angle(p.yaw - g.yaw)) for p, g in pairs]))
    ave = float(np.mean([np.linalg.norm(p.velocity - g.velocity) for p, g in pairs]))
    aae = float(1.0 - np.mean([p.attribute == g.attribute for p, g in pairs]))
    return (ate, ase, aoe, ave, aae)


def nds(mean_ap: float, mtp: tuple[float, float, float, float, float]) -> float:
    """Composite detection score: (5 mAP + sum(1 - min(1, mTP))) / 10."""
    return float((5.0 * mean_ap + sum(1.0 - min(1.0, x) for x in mtp)) / 10.0)


TP_NAMES = ("mate", "mase", "maoe", "mave", "maae")


@dataclass
class MetricReport:
    mean_ap: float
    mate: float
    mase: float
    maoe: float
    mave: float
    maae: float
    nds: float
    per_class_ap: dict[int, dict[float, float]] = field(default_factory=dict)
    map_at: dict[float, float] = field(default_factory=dict)

    def mtp(self) -> tuple[float, float, float, float, float]:
        return (self.mate, self.mase, self.maoe, self.mave, self.maae)

    def to_json(self) -> dict:
        return {
            "mAP": self.mean_ap,
            "mATE": self.mate, "mASE": self.mase, "mAOE": self.maoe,
            "mAVE": self.mave, "mAAE": self.maae,
            "NDS": self.nds,
            "per_class_ap": {str(c): {str(t): v for t, v in thr.items()}
                             for c, thr in self.per_class_ap.items()},
            "mAP_at": {str(t): v for t, v in self.map_at.items()},
        }

    def to_csv(self) -> str:
        header = ["NDS", "mAP", "mATE", "mASE", "mAOE", "mAVE", "mAAE"]
        row = [self.nds, self.mean_ap, self.mate, self.mase, self.maoe,
               self.mave, self.maae]
        return (",".join(header) + "\n"
                + ",".join(f"{x:.6f}" for x in row) + "\n")


def evaluate(preds: list[DetectionRecord], gts: list[DetectionRecord],
             config: EvalConfig = EvalConfig()) -> MetricReport:
    """Full metric report over a prediction and ground-truth set.

    mAP averages per-class AP over every matching threshold; TP metrics
    average per-class values at the TP threshold. With no ground truth at
    all the report degrades to mAP 0 and worst-case TP metrics.
    """
    classes = sorted({g.class_id for g in gts})
    if not classes:
        return MetricReport(0.0, 1.0, 1.0, 1.0, 1.0, 1.0, nds(0.0, (1.0,) * 5))
    per_class_ap: dict[int, dict[float, float]] = {}
    aps = []
    for c in classes:
        per_class_ap[c] = {}
        for thr in config.dist_thresholds:
            ap = average_precision(preds, gts, c, thr)
            per_class_ap[c][thr] = ap if ap is not None else 0.0
            aps.append(ap)
    mean_ap = float(np.mean([a for a in aps if a is not None]))
    map_at = {thr: float(np.mean([per_class_ap[c][thr] for c in classes]))
              for thr in config.dist_thresholds}
    per_metric: list[list[float]] = [[] for _ in range(5)]
    for c in classes:
        cls_preds = [p for p in preds if p.class_id == c]
        cls_gts = [g for g in gts if g.class_id == c]
        pairs, _ = greedy_match(cls_preds, cls_gts, config.tp_threshold)
        for slot, value in enumerate(tp_metrics(pairs)):
            per_metric[slot].append(value)
    mtp = tuple(float(np.mean(vals)) for vals in per_metric)
    return MetricReport(mean_ap, *mtp, nds(mean_ap, mtp),
                        per_class_ap=per_class_ap, map_at=map_at)
