"""Bipartite matching of predictions to ground-truth persons and the
training losses: keypoint regression, classification, and the triplet-based
instance consistency term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import tensor as T
from .tensor import Tensor

LAMBDA_KPT = 5.0
LAMBDA_CLS = 2.0
LAMBDA_IC = 1.0
DEFAULT_MARGIN = 0.3

_SCORE_FLOOR = 1e-12


@dataclass
class MatchAssignment:
    pairs: list          # (prediction index, ground-truth index), sorted by pred
    unmatched: list      # prediction indices with no ground-truth partner
    total_cost: float = 0.0


def hungarian_match(cost: np.ndarray) -> MatchAssignment:
    """Minimum-cost injective assignment of predictions (rows) to ground
    truth (columns); pairs reported in prediction-index order."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be a matrix, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains non-finite entries")
    P, G = cost.shape
    if G == 0 or P == 0:
        return MatchAssignment(pairs=[], unmatched=list(range(P)))
    rows, cols = linear_sum_assignment(cost)
    order = np.argsort(rows)
    pairs = [(int(rows[i]), int(cols[i])) for i in order]
    matched = {p for p, _ in pairs}
    unmatched = [i for i in range(P) if i not in matched]
    return MatchAssignment(pairs=pairs, unmatched=unmatched,
                           total_cost=float(cost[rows, cols].sum()))


def match_cost_matrix(pred_keypoints: np.ndarray, pred_scores: np.ndarray,
                      gt_keypoints: np.ndarray, gt_visible: np.ndarray,
                      lambda_kpt: float = LAMBDA_KPT,
                      lambda_cls: float = LAMBDA_CLS) -> np.ndarray:
    """Cost [P, G]: weighted mean-visible-joint L1 distance plus -log score.

    A ground-truth person with no visible joints contributes the score term
    only. Matching is a discrete decision, so this runs outside the tape.
    """
    P = pred_keypoints.shape[0]
    G = gt_keypoints.shape[0]
    cost = np.zeros((P, G))
    score_term = -np.log(np.maximum(pred_scores, _SCORE_FLOOR))
    for g in range(G):
        vis = gt_visible[g]
        if vis.any():
            diff = np.abs(pred_keypoints[:, vis, :] - gt_keypoints[g, vis, :])
            cost[:, g] = lambda_kpt * diff.sum(axis=2).mean(axis=1)
    return cost + lambda_cls * score_term[:, None]


def keypoint_loss(pred: Tensor, gt: np.ndarray, visible: np.ndarray) -> Tensor:
    """Mean L1 distance over visible joints of matched pairs.

    ``pred`` is [P, K, 2] rows already gathered in pair order; ``gt`` and
    ``visible`` align with it. No pairs, or nothing visible, gives 0.
    """
    if pred.shape[0] == 0 or not visible.any():
        return Tensor(0.0)
    vi, vj = np.nonzero(visible)
    diff = T.absolute(pred[vi, vj, :] - Tensor(gt[vi, vj, :]))
    return diff.sum(axis=1).mean()


def classification_loss(scores: Tensor, matched: np.ndarray) -> Tensor:
    """Binary cross-entropy on probability scores; matched -> 1, else 0.

    Saturated correct predictions cost exactly zero: each side of the log is
    clamped only where it would diverge.
    """
    t = np.asarray(matched, dtype=bool)
    pos = T.masked_fill(scores, scores.data >= _SCORE_FLOOR, _SCORE_FLOOR)
    neg_in = 1.0 - scores
    neg = T.masked_fill(neg_in, neg_in.data >= _SCORE_FLOOR, _SCORE_FLOOR)
    per = T.masked_fill(-T.log(pos), t, 0.0) + T.masked_fill(-T.log(neg), ~t, 0.0)
    return per.mean()


def build_triplets(records: list, rng: np.random.Generator) -> list:
    """Sample (anchor, positive, negative) embedding-row triples.

    ``records[f]`` lists (embedding row, track id) for the matched
    predictions of frame f; rows index one shared embedding matrix. Each
    anchor draws one positive (same track, different frame) and one negative
    (different track, any frame) uniformly; anchors without both are skipped.
    """
    flat = [(f, row, tid) for f, frame in enumerate(records)
            for row, tid in frame]
    triplets = []
    for f, row, tid in flat:
        positives = [r for (g, r, t2) in flat if t2 == tid and g != f]
        negatives = [r for (_, r, t2) in flat if t2 != tid]
        if not positives or not negatives:
            continue
        p = positives[rng.integers(len(positives))]
        n = negatives[rng.integers(len(negatives))]
        triplets.append((row, p, n))
    return triplets


def instance_consistency_loss(embeddings: Tensor, triplets: list,
                              margin: float = DEFAULT_MARGIN) -> Tensor:
    """Mean over triplets of max(0, d(a,p) - d(a,n) + margin), with
    d(x,y) = 1 - cosine similarity."""
    if not triplets:
        return Tensor(0.0)
    idx = np.asarray(triplets, dtype=np.intp)
    used = np.unique(idx)
    norms = np.linalg.norm(embeddings.data[used], axis=1)
    if (norms < 1e-12).any():
        bad = int(used[int(np.argmin(norms))])
        raise ValueError(f"instance embedding {bad} has zero norm")

    def unit(rows):
        v = T.take_rows(embeddings, rows)
        n = (v * v).sum(axis=1, keepdims=True) ** 0.5
        return v / n

    a, p, n = unit(idx[:, 0]), unit(idx[:, 1]), unit(idx[:, 2])
    d_ap = 1.0 - (a * p).sum(axis=1)
    d_an = 1.0 - (a * n).sum(axis=1)
    return T.relu(d_ap - d_an + margin).mean()


def total_loss(l_kpt: Tensor, l_cls: Tensor, l_ic: Tensor,
               lambda_kpt: float = LAMBDA_KPT, lambda_cls: float = LAMBDA_CLS,
               lambda_ic: float = LAMBDA_IC) -> Tensor:
    return l_kpt * lambda_kpt + l_cls * lambda_cls + l_ic * lambda_ic
