"""Average-precision evaluation over joint groups and the instance-count
runtime probe.

Protocol: per frame, predictions are ranked by score and greedily claim the
closest unclaimed ground-truth person (mean distance over the person's
visible joints, normalized by person scale). A matched joint is correct when
it lands within tau * scale of the annotation, where scale is the diagonal
of the visible-joint bounding box. Detections pool across the whole dataset
into one ranked precision/recall curve per joint group; ties in score are
processed as one block so the curve is invariant to positive rescaling.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

# Table column order for reports, plus the joint indices behind each column.
GROUP_ORDER = ("Shoulder", "Head", "Elbow", "Wrist", "Hip", "Ankle", "Knee")
GROUPS = {
    "Head": (0, 1, 2),
    "Shoulder": (3, 4),
    "Elbow": (5, 6),
    "Wrist": (7, 8),
    "Hip": (9, 10),
    "Knee": (11, 12),
    "Ankle": (13, 14),
}

# Degenerate persons (one visible joint) have a zero-area box; a floor keeps
# the correctness threshold meaningful.
_SCALE_FLOOR = 0.05


@dataclass
class EvalReport:
    per_joint: dict           # group name -> AP in [0, 1]
    mean_ap: float
    instances: int            # ground-truth persons entering the denominator
    clips: int
    tau: float


@dataclass
class FrameEval:
    """One frame's predictions and ground truth, all plain arrays."""
    pred_keypoints: np.ndarray   # [N, 15, 2]
    pred_scores: np.ndarray      # [N]
    gt_keypoints: np.ndarray     # [G, 15, 2]
    gt_visible: np.ndarray       # [G, 15] bool


def person_scale(keypoints: np.ndarray, visible: np.ndarray) -> float:
    pts = keypoints[visible]
    if len(pts) == 0:
        return 0.0
    span = pts.max(axis=0) - pts.min(axis=0)
    return max(float(np.hypot(span[0], span[1])), _SCALE_FLOOR)


def greedy_instance_match(frame: FrameEval) -> list:
    """(prediction index, gt index) pairs; higher-scored predictions pick
    first, ties broken by lower prediction index. GT persons with no visible
    joints never participate."""
    candidates = [g for g in range(len(frame.gt_keypoints))
                  if frame.gt_visible[g].any()]
    order = np.argsort(-frame.pred_scores, kind="stable")
    pairs = []
    taken = set()
    for p in order:
        if len(taken) == len(candidates):
            break
        best_g, best_d = -1, np.inf
        for g in candidates:
            if g in taken:
                continue
            vis = frame.gt_visible[g]
            scale = person_scale(frame.gt_keypoints[g], vis)
            d = np.linalg.norm(frame.pred_keypoints[p, vis]
                               - frame.gt_keypoints[g, vis], axis=1).mean()
            d /= scale
            if d < best_d:
                best_g, best_d = g, d
        pairs.append((int(p), best_g))
        taken.add(best_g)
    return pairs


def _ranked_ap(scores: np.ndarray, correct: np.ndarray, n_targets: int) -> float:
    """Area under the precision/recall curve, equal scores as one block."""
    if n_targets == 0:
        return 0.0
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    scores = scores[order]
    correct = correct[order]
    ap = 0.0
    tp = fp = 0
    prev_recall = 0.0
    i = 0
    while i < len(scores):
        j = i
        while j < len(scores) and scores[j] == scores[i]:
            j += 1
        tp += int(correct[i:j].sum())
        fp += int((j - i) - correct[i:j].sum())
        recall = tp / n_targets
        precision = tp / (tp + fp)
        ap += (recall - prev_recall) * precision
        prev_recall = recall
        i = j
    return ap


def compute_ap(frames: list, tau: float) -> EvalReport:
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    det_scores = {g: [] for g in GROUP_ORDER}
    det_correct = {g: [] for g in GROUP_ORDER}
    targets = {g: 0 for g in GROUP_ORDER}
    instances = 0

    for frame in frames:
        usable = [g for g in range(len(frame.gt_keypoints))
                  if frame.gt_visible[g].any()]
        instances += len(usable)
        for name in GROUP_ORDER:
            for g in usable:
                targets[name] += int(frame.gt_visible[g, list(GROUPS[name])].sum())
        pairs = greedy_instance_match(frame)
        matched_preds = {p for p, _ in pairs}
        for p, g in pairs:
            scale = person_scale(frame.gt_keypoints[g], frame.gt_visible[g])
            dist = np.linalg.norm(frame.pred_keypoints[p] - frame.gt_keypoints[g],
                                  axis=1)
            for name in GROUP_ORDER:
                for j in GROUPS[name]:
                    if frame.gt_visible[g, j]:
                        det_scores[name].append(frame.pred_scores[p])
                        det_correct[name].append(dist[j] <= tau * scale)
        for p in range(len(frame.pred_scores)):
            if p in matched_preds:
                continue
            for name in GROUP_ORDER:
                for _ in GROUPS[name]:
                    det_scores[name].append(frame.pred_scores[p])
                    det_correct[name].append(False)

    per_joint = {}
    for name in GROUP_ORDER:
        per_joint[name] = _ranked_ap(np.asarray(det_scores[name], dtype=float),
                                     np.asarray(det_correct[name], dtype=bool),
                                     targets[name])
    mean_ap = float(np.mean([per_joint[g] for g in GROUP_ORDER]))
    return EvalReport(per_joint=per_joint, mean_ap=mean_ap,
                      instances=instances, clips=len(frames), tau=tau)


def format_report(report: EvalReport) -> str:
    """Structured text, one AP column per joint group plus the mean."""
    header = " ".join(list(GROUP_ORDER) + ["Mean"])
    values = [report.per_joint[g] * 100.0 for g in GROUP_ORDER]
    values.append(report.mean_ap * 100.0)
    row = " ".join(f"{v:.1f}" for v in values)
    return (f"frames {report.clips} instances {report.instances} "
            f"tau {report.tau}\n{header}\n{row}\n")


# -- runtime probe ---------------------------------------------------------


@dataclass
class TimingTable:
    rows: list = field(default_factory=list)   # (instance count, median seconds)
    repeats: int = 0

    @property
    def ratio(self) -> float:
        meds = [m for _, m in self.rows]
        return max(meds) / min(meds) if meds else float("nan")

    def to_csv(self) -> str:
        lines = ["instances,median_seconds,repeats"]
        for count, med in self.rows:
            lines.append(f"{count},{med:.6f},{self.repeats}")
        return "\n".join(lines) + "\n"


def runtime_probe(make_input, forward, instance_counts, repeats: int = 5,
                  warmup: int = 1) -> TimingTable:
    """Median wall-clock time of ``forward(make_input(count))`` per count.

    ``make_input`` builds a fixed-resolution input with the requested person
    count; timing covers ``forward`` only.
    """
    table = TimingTable(repeats=repeats)
    for count in instance_counts:
        inp = make_input(count)
        for _ in range(warmup):
            forward(inp)
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            forward(inp)
            times.append(time.perf_counter() - t0)
        table.rows.append((count, float(np.median(times))))
    return table
