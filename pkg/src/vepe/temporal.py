"""Temporal components: pose query selection, instance-query masking, the
cross-frame pose encoder (STPE), the cross-frame memory encoder (STDME), and
the cascaded temporal pose decoder (STPD).

Sublayers are pre-norm throughout, so a blocked or disabled sublayer passes
its input through bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, DeformableAttention, MultiHeadAttention
from .module import Embedding, FeedForward, LayerNorm, Linear, Module, ModuleList
from .spatial import SpatialPoseSet
from .tensor import Tensor

DEFAULT_THRESHOLD = 0.3
MIN_KEEP = 5


@dataclass
class SelectedPoses:
    """Pose queries surviving score selection, in original slot order."""
    indices: np.ndarray       # [S] into the spatial pose set
    queries: Tensor           # [S, d_model]
    keypoints: Tensor         # [S, K_j, 2]
    scores: Tensor            # [S]
    score_logits: Tensor      # [S]


@dataclass
class TemporalPoseResult:
    keypoints_per_layer: list     # refined [S, K_j, 2] per decoder layer
    scores: Tensor                # [S]
    queries: Tensor               # [S, d_model]
    selected: SelectedPoses
    instance_embeddings: Tensor | None = None
    similarities: list = field(default_factory=list)  # per ref frame [S, S_r]
    ref_selected: list = field(default_factory=list)
    ref_instance_embeddings: list = field(default_factory=list)

    @property
    def keypoints(self) -> Tensor:
        return self.keypoints_per_layer[-1]


def select_poses(pose_set: SpatialPoseSet, threshold: float,
                 min_keep: int = MIN_KEEP) -> SelectedPoses:
    """Keep queries scoring >= threshold; never fewer than min_keep (top-up
    by score, stable towards lower slot index)."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    scores = pose_set.scores.data
    keep = scores >= threshold
    if keep.sum() < min_keep:
        top = np.argsort(-scores, kind="stable")[:min_keep]
        keep = np.zeros(len(scores), dtype=bool)
        keep[top] = True
    idx = np.flatnonzero(keep)
    return SelectedPoses(
        indices=idx,
        queries=T.take_rows(pose_set.pose_queries, idx),
        keypoints=T.take_rows(pose_set.keypoints, idx),
        scores=T.take_rows(pose_set.scores, idx),
        score_logits=T.take_rows(pose_set.score_logits, idx))


class InstanceQueryHead(Module):
    """One learned embedding per pose-query slot, fused with the pose query
    content through a small MLP."""

    def __init__(self, rng, n_queries: int, d_model: int):
        super().__init__()
        self.table = Embedding(rng, n_queries, d_model, scale=1.0)
        self.fuse = Linear(rng, d_model, d_model)
        self.out = Linear(rng, d_model, d_model)

    def __call__(self, selected: SelectedPoses) -> Tensor:
        x = self.table(selected.indices) + selected.queries
        return self.out(T.gelu(self.fuse(x)))


def compute_instance_mask(key_instances: Tensor, ref_instances: list):
    """Per reference frame: cosine similarities [N_key, N_ref] and a boolean
    mask holding each key row's single most similar reference entry.

    Masking is a discrete routing decision, so it works on detached values.
    """
    def unit_rows(t: Tensor) -> np.ndarray:
        v = t.data
        n = np.linalg.norm(v, axis=1, keepdims=True)
        return v / np.maximum(n, 1e-12)

    key = unit_rows(key_instances)
    masks, sims = [], []
    for ref in ref_instances:
        s = key @ unit_rows(ref).T
        m = np.zeros_like(s, dtype=bool)
        if s.shape[1] > 0:
            m[np.arange(s.shape[0]), s.argmax(axis=1)] = True
        masks.append(m)
        sims.append(s)
    return masks, sims


class STPELayer(Module):
    def __init__(self, rng, cfg: AttentionConfig):
        super().__init__()
        self.self_attn = MultiHeadAttention(rng, cfg.d_model, cfg.heads)
        self.cross_attn = MultiHeadAttention(rng, cfg.d_model, cfg.heads)
        self.ffn = FeedForward(rng, cfg.d_model, cfg.ffn_width)
        self.norm_self = LayerNorm(cfg.d_model)
        self.norm_cross = LayerNorm(cfg.d_model)
        self.norm_ffn = LayerNorm(cfg.d_model)

    def __call__(self, x: Tensor, refs: Tensor | None,
                 mask: np.ndarray | None) -> Tensor:
        n = self.norm_self(x)
        x = x + self.self_attn(n, n, n)
        if refs is not None and refs.shape[0] > 0:
            if mask is None:
                x = x + self.cross_attn(self.norm_cross(x), refs, refs)
            else:
                alive = mask.any(axis=1)
                if alive.all():
                    out = self.cross_attn(self.norm_cross(x), refs, refs,
                                          mask=mask)
                else:
                    # Rows with nothing to attend to fall back to the self
                    # path: run them unmasked, then zero their cross output
                    # so the residual passes the row through untouched.
                    patched = mask.copy()
                    patched[~alive] = True
                    out = self.cross_attn(self.norm_cross(x), refs, refs,
                                          mask=patched)
                    out = T.masked_fill(out, alive[:, None], 0.0)
                x = x + out
        return x + self.ffn(self.norm_ffn(x))


class STPE(Module):
    """Cross-frame pose-query encoder: self-attention over keyframe queries,
    masked cross-attention into the reference frames' selected queries."""

    def __init__(self, rng, cfg: AttentionConfig, layers: int = 2):
        super().__init__()
        self.layers = ModuleList([STPELayer(rng, cfg) for _ in range(layers)])

    def __call__(self, key_queries: Tensor, ref_queries: list,
                 masks: list | None) -> Tensor:
        if ref_queries:
            refs = T.concat(ref_queries, axis=0) if len(ref_queries) > 1 \
                else ref_queries[0]
            mask = np.concatenate(masks, axis=1) if masks is not None else None
        else:
            refs, mask = None, None
        x = key_queries
        for layer in self.layers:
            x = layer(x, refs, mask)
        return x


class STDMELayer(Module):
    """Intra-frame deformable self-attention on keyframe tokens, then
    cross-frame deformable attention over the whole clip window."""

    def __init__(self, rng, cfg: AttentionConfig):
        super().__init__()
        self.intra = DeformableAttention(rng, cfg, frames=1)
        self.cross = DeformableAttention(rng, cfg, frames=cfg.frames)
        self.ffn = FeedForward(rng, cfg.d_model, cfg.ffn_width)
        self.norm_intra = LayerNorm(cfg.d_model)
        self.norm_cross = LayerNorm(cfg.d_model)
        self.norm_ffn = LayerNorm(cfg.d_model)

    def __call__(self, tokens, key_maps, all_frames, shapes, refs):
        tokens = tokens + self.intra(self.norm_intra(tokens), [key_maps],
                                     shapes, refs)
        tokens = tokens + self.cross(self.norm_cross(tokens), all_frames,
                                     shapes, refs)
        return tokens + self.ffn(self.norm_ffn(tokens))


class STDME(Module):
    def __init__(self, rng, cfg: AttentionConfig, layers: int = 2):
        super().__init__()
        self.cfg = cfg
        self.layers = ModuleList([STDMELayer(rng, cfg) for _ in range(layers)])

    def __call__(self, key_maps: list, ref_memories: list, shapes) -> list:
        """Aggregate reference-frame evidence into the keyframe maps.

        Missing references are stood in for by the keyframe itself, the same
        convention clip boundaries use, so the window is always full."""
        window = [key_maps] + list(ref_memories)
        while len(window) < self.cfg.frames:
            window.append(key_maps)
        if len(window) > self.cfg.frames:
            raise T.ConfigError(
                f"got {len(ref_memories)} reference memories; window of "
                f"{self.cfg.frames} frames allows {self.cfg.frames - 1}")
        d = self.cfg.d_model
        from .spatial import SpatialStage
        refs = Tensor(SpatialStage.token_references(shapes))
        tokens = T.concat([m.reshape(s[0] * s[1], d)
                           for m, s in zip(key_maps, shapes)], axis=0)
        for layer in self.layers:
            grids = self._split(tokens, shapes)
            tokens = layer(tokens, grids, window, shapes, refs)
            window = [self._split(tokens, shapes)] + window[1:]
        return self._split(tokens, shapes)

    @staticmethod
    def _split(tokens: Tensor, shapes) -> list:
        maps = []
        offset = 0
        for h, w in shapes:
            maps.append(tokens[offset:offset + h * w, :].reshape(h, w, -1))
            offset += h * w
        return maps


class STPDLayer(Module):
    def __init__(self, rng, cfg: AttentionConfig, n_joints: int):
        super().__init__()
        self.self_attn = MultiHeadAttention(rng, cfg.d_model, cfg.heads)
        self.cross_attn = DeformableAttention(rng, cfg, frames=1)
        self.ffn = FeedForward(rng, cfg.d_model, cfg.ffn_width)
        self.norm_self = LayerNorm(cfg.d_model)
        self.norm_cross = LayerNorm(cfg.d_model)
        self.norm_ffn = LayerNorm(cfg.d_model)
        self.kp_head = Linear(rng, cfg.d_model, n_joints * 2, zero_init=True)

    def __call__(self, q: Tensor, maps, shapes, keypoints: Tensor):
        n = self.norm_self(q)
        q = q + self.self_attn(n, n, n)
        refs = Tensor(keypoints.data.mean(axis=1))
        q = q + self.cross_attn(self.norm_cross(q), [maps], shapes, refs)
        q = q + self.ffn(self.norm_ffn(q))
        delta = self.kp_head(q).reshape(*keypoints.shape)
        return q, T.sigmoid_shift(keypoints, delta)


class STPD(Module):
    """Three cascaded decoder layers refining keypoints in logit space; the
    final layer also scores each query. Scoring is residual: the head emits
    a logit correction on top of ``base_logits`` (the confidence the query
    arrived with), so a freshly built decoder passes scores through
    unchanged instead of overwriting a calibrated upstream estimate."""

    def __init__(self, rng, cfg: AttentionConfig, n_joints: int,
                 layers: int = 3):
        super().__init__()
        self.layers = ModuleList([STPDLayer(rng, cfg, n_joints)
                                  for _ in range(layers)])
        self.score_head = Linear(rng, cfg.d_model, 1, zero_init=True)

    def __call__(self, queries: Tensor, maps, shapes,
                 initial_keypoints: Tensor,
                 base_logits: Tensor | None = None) -> tuple:
        kp = initial_keypoints
        per_layer = []
        q = queries
        for layer in self.layers:
            q, kp = layer(q, maps, shapes, kp)
            per_layer.append(kp)
        delta = self.score_head(q).reshape(q.shape[0])
        scores = T.sigmoid(delta if base_logits is None
                           else delta + base_logits)
        return q, per_layer, scores


class TemporalStage(Module):
    """Selection + ICM masking + STPE + STDME + STPD over one keyframe and
    its reference frames. Components can be disabled for ablations; a
    disabled component's input passes through unchanged."""

    def __init__(self, rng, cfg: AttentionConfig, n_queries: int,
                 n_joints: int, stpe_layers: int = 2, stdme_layers: int = 2,
                 stpd_layers: int = 3, use_mask: bool = True,
                 use_stdme: bool = True, use_stpd: bool = True,
                 threshold: float = DEFAULT_THRESHOLD, min_keep: int = MIN_KEEP):
        super().__init__()
        self.use_mask = use_mask
        self.use_stdme = use_stdme
        self.use_stpd = use_stpd
        self.threshold = threshold
        self.min_keep = min_keep
        self.n_joints = n_joints
        self.instance_head = InstanceQueryHead(rng, n_queries, cfg.d_model)
        self.stpe = STPE(rng, cfg, stpe_layers)
        self.stdme = STDME(rng, cfg, stdme_layers)
        self.stpd = STPD(rng, cfg, n_joints, stpd_layers)
        # Fallback head when the decoder is ablated away: one refinement
        # step plus a residual score correction from the encoded queries.
        self.plain_kp_head = Linear(rng, cfg.d_model, n_joints * 2,
                                    zero_init=True)
        self.plain_score_head = Linear(rng, cfg.d_model, 1, zero_init=True)

    def __call__(self, key_set: SpatialPoseSet, key_maps, shapes,
                 ref_sets: list, ref_memories: list) -> TemporalPoseResult:
        key_sel = select_poses(key_set, self.threshold, self.min_keep)
        ref_sels = [select_poses(s, self.threshold, self.min_keep)
                    for s in ref_sets]

        key_inst = self.instance_head(key_sel)
        ref_insts = [self.instance_head(s) for s in ref_sels]
        masks, sims = compute_instance_mask(key_inst, ref_insts)

        q = self.stpe(key_sel.queries, [s.queries for s in ref_sels],
                      masks if self.use_mask else None)

        maps = self.stdme(key_maps, ref_memories, shapes) if self.use_stdme \
            else key_maps

        if self.use_stpd:
            q, per_layer, scores = self.stpd(q, maps, shapes, key_sel.keypoints,
                                             base_logits=key_sel.score_logits)
        else:
            delta = self.plain_kp_head(q).reshape(*key_sel.keypoints.shape)
            per_layer = [T.sigmoid_shift(key_sel.keypoints, delta)]
            corr = self.plain_score_head(q).reshape(q.shape[0])
            scores = T.sigmoid(corr + key_sel.score_logits)

        return TemporalPoseResult(
            keypoints_per_layer=per_layer, scores=scores, queries=q,
            selected=key_sel, instance_embeddings=key_inst,
            similarities=sims, ref_selected=ref_sels,
            ref_instance_embeddings=ref_insts)
