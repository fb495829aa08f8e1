"""Training loops, evaluation, threshold sweeping, and tracking agreement.

Three training modes:
  spatial   per-frame supervision of the spatial stage alone
  temporal  spatial weights frozen, temporal stage supervised on keyframes
  joint     both stages trained together

Matching predictions to ground truth is a discrete decision made outside
the tape; only the gathered rows carry gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import RunConfig
from .losses import (build_triplets, classification_loss, hungarian_match,
                     instance_consistency_loss, keypoint_loss,
                     match_cost_matrix, total_loss)
from .metrics import EvalReport, FrameEval, compute_ap
from .model import VepeModel
from .tensor import Tensor, backward, no_grad, tape

MODES = ("spatial", "temporal", "joint")


class AdamW:
    """Decoupled weight decay; moments keyed by parameter name."""

    def __init__(self, params: dict, lr: float, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= self.lr * (update + self.weight_decay * p.data)


def _gt_arrays(annotations: list, n_joints: int):
    if not annotations:
        return np.zeros((0, n_joints, 2)), np.zeros((0, n_joints), dtype=bool)
    kps = np.stack([a.keypoints for a in annotations])
    vis = np.stack([a.visible for a in annotations]).astype(bool)
    return kps, vis


def _match(pred_kps: np.ndarray, pred_scores: np.ndarray, gt_kps, gt_vis,
           cfg: RunConfig):
    cost = match_cost_matrix(pred_kps, pred_scores, gt_kps, gt_vis,
                             cfg.lambda_kpt, cfg.lambda_cls)
    return hungarian_match(cost)


def spatial_losses(pose_set, annotations: list, cfg: RunConfig):
    """Keypoint + classification loss for one frame's full pose set."""
    gt_kps, gt_vis = _gt_arrays(annotations, cfg.n_joints)
    asn = _match(pose_set.keypoints.data, pose_set.scores.data,
                 gt_kps, gt_vis, cfg)
    pi = np.array([p for p, _ in asn.pairs], dtype=np.intp)
    gi = np.array([g for _, g in asn.pairs], dtype=np.intp)
    l_kpt = keypoint_loss(T.take_rows(pose_set.keypoints, pi),
                          gt_kps[gi], gt_vis[gi])
    matched = np.zeros(pose_set.scores.shape[0], dtype=bool)
    matched[pi] = True
    l_cls = classification_loss(pose_set.scores, matched)
    return l_kpt, l_cls, asn


def _selected_track_pairs(selected, annotations: list, cfg: RunConfig) -> list:
    """Match a frame's selected (pre-refinement) poses to ground truth and
    return (row in selection, track id) pairs."""
    gt_kps, gt_vis = _gt_arrays(annotations, cfg.n_joints)
    asn = _match(selected.keypoints.data, selected.scores.data,
                 gt_kps, gt_vis, cfg)
    return [(p, annotations[g].track_id) for p, g in asn.pairs]


def temporal_losses(result, annotations_per_frame: list, cfg: RunConfig,
                    rng: np.random.Generator):
    """Losses for one keyframe pass: layer-averaged keypoint regression,
    classification over the selected set, and the cross-frame instance
    consistency term."""
    key_idx = result.key_idx
    tp = result.temporal
    gt_kps, gt_vis = _gt_arrays(annotations_per_frame[key_idx], cfg.n_joints)
    asn = _match(tp.keypoints.data, tp.scores.data, gt_kps, gt_vis, cfg)
    pi = np.array([p for p, _ in asn.pairs], dtype=np.intp)
    gi = np.array([g for _, g in asn.pairs], dtype=np.intp)

    layer_terms = [keypoint_loss(T.take_rows(kp, pi), gt_kps[gi], gt_vis[gi])
                   for kp in tp.keypoints_per_layer]
    l_kpt = layer_terms[0]
    for term in layer_terms[1:]:
        l_kpt = l_kpt + term
    l_kpt = l_kpt / len(layer_terms)

    matched = np.zeros(tp.scores.shape[0], dtype=bool)
    matched[pi] = True
    l_cls = classification_loss(tp.scores, matched)

    l_ic = Tensor(0.0)
    if cfg.lambda_ic > 0:
        window = [(key_idx, tp.selected, tp.instance_embeddings)]
        seen = {key_idx}
        for i, r in enumerate(result.ref_indices):
            if r not in seen:
                window.append((r, tp.ref_selected[i],
                               tp.ref_instance_embeddings[i]))
                seen.add(r)
        records, blocks, offset = [], [], 0
        for t, sel, inst in window:
            pairs = _selected_track_pairs(sel, annotations_per_frame[t], cfg)
            records.append([(offset + row, tid) for row, tid in pairs])
            blocks.append(inst)
            offset += inst.shape[0]
        triplets = build_triplets(records, rng)
        if triplets:
            l_ic = instance_consistency_loss(T.concat(blocks, axis=0),
                                             triplets, cfg.margin)
    return l_kpt, l_cls, l_ic


def precompute_spatial(model: VepeModel, clips: list) -> dict:
    """Frozen-spatial feature cache: clip index -> {frame index -> features}."""
    cache = {}
    with no_grad():
        for ci, clip in enumerate(clips):
            cache[ci] = {t: model.forward_frame(clip.frames[t])
                         for t in range(len(clip.frames))}
    return cache


def train(model: VepeModel, clips: list, cfg: RunConfig, mode: str,
          eval_clips: list | None = None, log_fn=None) -> list:
    """Run cfg.epochs of training; returns one structured log line per epoch
    ("epoch E mode M loss L map A"). ``eval_clips`` drives the per-epoch
    accuracy figure; without it the map column reads nan."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if not clips:
        raise ValueError("no training clips")
    params = model.named_parameters()
    if mode == "temporal":
        params = {k: v for k, v in params.items()
                  if not k.startswith("spatial.")}
    opt = AdamW(params, cfg.lr, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed + 1)

    samples = [(ci, t) for ci, clip in enumerate(clips)
               for t in range(len(clip.frames))]
    spatial_cache = precompute_spatial(model, clips) \
        if mode == "temporal" else None

    lines = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(samples))
        batch_means = []
        for start in range(0, len(order), cfg.batch_size):
            tape().clear()
            chunk = order[start:start + cfg.batch_size]
            losses = []
            for s in chunk:
                ci, t = samples[s]
                clip = clips[ci]
                if mode == "spatial":
                    feats = model.forward_frame(clip.frames[t])
                    l_kpt, l_cls, _ = spatial_losses(feats.pose_set,
                                                     clip.annotations[t], cfg)
                    loss = total_loss(l_kpt, l_cls, Tensor(0.0),
                                      cfg.lambda_kpt, cfg.lambda_cls, 0.0)
                else:
                    res = model.forward_clip(
                        clip.frames, t,
                        freeze_spatial=(mode == "temporal"),
                        cache=spatial_cache[ci] if spatial_cache else None)
                    l_kpt, l_cls, l_ic = temporal_losses(
                        res, clip.annotations, cfg, rng)
                    loss = total_loss(l_kpt, l_cls, l_ic, cfg.lambda_kpt,
                                      cfg.lambda_cls, cfg.lambda_ic)
                    if mode == "joint":
                        s_kpt, s_cls, _ = spatial_losses(
                            res.frames[t].pose_set, clip.annotations[t], cfg)
                        loss = loss + total_loss(s_kpt, s_cls, Tensor(0.0),
                                                 cfg.lambda_kpt,
                                                 cfg.lambda_cls, 0.0)
                losses.append(loss)
            mean = losses[0]
            for l in losses[1:]:
                mean = mean + l
            mean = mean / len(losses)
            backward(mean)
            opt.step()
            batch_means.append(mean.item())
        tape().clear()

        train_loss = float(np.mean(batch_means))
        if eval_clips:
            eval_mode = "spatial" if mode == "spatial" else "temporal"
            report, _ = evaluate(model, eval_clips, cfg, eval_mode, cfg.tau)
            map_val = report.mean_ap
        else:
            map_val = float("nan")
        line = (f"epoch {epoch + 1} mode {mode} "
                f"loss {train_loss:.6f} map {map_val:.4f}")
        lines.append(line)
        if log_fn:
            log_fn(line)
    return lines


def evaluate(model: VepeModel, clips: list, cfg: RunConfig, mode: str,
             tau: float) -> tuple[EvalReport, list]:
    """Predict every frame (spatial mode) or every frame as keyframe
    (temporal mode) and score against ground truth."""
    if mode not in ("spatial", "temporal"):
        raise ValueError(f"eval mode must be spatial or temporal, got {mode!r}")
    evals = []
    with no_grad():
        for clip in clips:
            cache: dict = {}
            for t in range(len(clip.frames)):
                gt_kps, gt_vis = _gt_arrays(clip.annotations[t], cfg.n_joints)
                if mode == "spatial":
                    feats = model.forward_frame(clip.frames[t])
                    pred_kps = feats.pose_set.keypoints.data
                    pred_scores = feats.pose_set.scores.data
                else:
                    res = model.forward_clip(clip.frames, t,
                                             freeze_spatial=True, cache=cache)
                    pred_kps = res.temporal.keypoints.data
                    pred_scores = res.temporal.scores.data
                evals.append(FrameEval(pred_keypoints=pred_kps.copy(),
                                       pred_scores=pred_scores.copy(),
                                       gt_keypoints=gt_kps,
                                       gt_visible=gt_vis))
    tape().clear()
    return compute_ap(evals, tau), evals


@dataclass
class SweepRow:
    threshold: float
    mean_ap: float
    mean_retained: float


def threshold_sweep(model: VepeModel, clips: list, cfg: RunConfig,
                    thresholds: list) -> list:
    """Evaluate the temporal path at each selection threshold. Audits that
    the mean retained-query count never increases as the threshold rises."""
    rows = []
    saved = model.temporal.threshold
    try:
        for th in thresholds:
            model.temporal.threshold = float(th)
            report, evals = evaluate(model, clips, cfg, "temporal", cfg.tau)
            retained = float(np.mean([len(e.pred_scores) for e in evals]))
            rows.append(SweepRow(threshold=float(th), mean_ap=report.mean_ap,
                                 mean_retained=retained))
    finally:
        model.temporal.threshold = saved
    ordered = sorted(rows, key=lambda r: r.threshold)
    for lo, hi in zip(ordered, ordered[1:]):
        if hi.mean_retained > lo.mean_retained + 1e-9:
            raise RuntimeError(
                f"retained count grew from {lo.mean_retained} at threshold "
                f"{lo.threshold} to {hi.mean_retained} at {hi.threshold}")
    return rows


def tracking_agreement(model: VepeModel, clips: list, cfg: RunConfig) -> float:
    """Fraction of keyframe instances whose most-similar reference entry
    carries the same ground-truth track id, over adjacent frame pairs where
    both sides are matched to ground truth."""
    agree = total = 0
    with no_grad():
        for clip in clips:
            cache: dict = {}
            for t in range(len(clip.frames)):
                res = model.forward_clip(clip.frames, t, freeze_spatial=True,
                                         cache=cache)
                tp = res.temporal
                key_pairs = dict(_selected_track_pairs(
                    tp.selected, clip.annotations[t], cfg))
                for i, r in enumerate(res.ref_indices):
                    if r == t:
                        continue
                    ref_pairs = dict(_selected_track_pairs(
                        tp.ref_selected[i], clip.annotations[r], cfg))
                    ref_tracks = set(ref_pairs.values())
                    sims = tp.similarities[i]
                    for row, tid in key_pairs.items():
                        if tid not in ref_tracks or sims.shape[1] == 0:
                            continue
                        link = int(np.argmax(sims[row]))
                        total += 1
                        agree += int(ref_pairs.get(link) == tid)
    tape().clear()
    return agree / total if total else 0.0
