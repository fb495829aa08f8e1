"""Attention mechanisms: scaled dot-product multi-head attention and
multi-scale deformable attention over one frame or several.

The deformable variant keeps two genuinely separate forward paths: a
single-frame one used by the per-frame encoder/decoder, and a multi-frame
one used by the temporal blocks. Their agreement at one frame is a test
subject, not a shared code path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .module import Linear, Module
from .tensor import ConfigError, ShapeError, Tensor


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int = 64
    heads: int = 4
    levels: int = 3
    points: int = 4
    frames: int = 3
    ffn_width: int = 256

    def __post_init__(self):
        for field in ("d_model", "heads", "levels", "points", "frames", "ffn_width"):
            if getattr(self, field) < 1:
                raise ConfigError(f"{field} must be >= 1, got {getattr(self, field)}")
        if self.d_model % self.heads:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by {self.heads} heads")


class MultiHeadAttention(Module):
    """Scaled dot-product attention; residual connections belong to callers.

    ``mask`` is boolean [N_q, N_k], True where a query may attend. Masked
    positions get exactly zero weight, so their value rows cannot leak into
    the output.
    """

    def __init__(self, rng: np.random.Generator, d_model: int, heads: int):
        super().__init__()
        if d_model % heads:
            raise ConfigError(f"d_model {d_model} not divisible by {heads} heads")
        self.heads = heads
        self.d_head = d_model // heads
        self.q_proj = Linear(rng, d_model, d_model)
        self.k_proj = Linear(rng, d_model, d_model)
        self.v_proj = Linear(rng, d_model, d_model)
        self.out_proj = Linear(rng, d_model, d_model)

    def __call__(self, q: Tensor, k: Tensor, v: Tensor,
                 mask: np.ndarray | None = None) -> Tensor:
        if k.shape[0] != v.shape[0]:
            raise ShapeError(f"keys {k.shape} and values {v.shape} disagree on rows")
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != (q.shape[0], k.shape[0]):
                raise ShapeError(f"mask shape {mask.shape} does not match "
                                 f"[{q.shape[0]}, {k.shape[0]}]")
            dead = ~mask.any(axis=1)
            if dead.any():
                idx = int(np.flatnonzero(dead)[0])
                raise ValueError(f"query {idx} has no attendable keys under the mask")
        qp = self.q_proj(q)
        kp = self.k_proj(k)
        vp = self.v_proj(v)
        scale = 1.0 / math.sqrt(self.d_head)
        heads_out = []
        for m in range(self.heads):
            cols = slice(m * self.d_head, (m + 1) * self.d_head)
            logits = T.matmul(qp[:, cols], kp[:, cols].T) * scale
            if mask is not None:
                logits = T.masked_fill(logits, mask, float("-inf"))
            heads_out.append(T.matmul(T.softmax(logits, axis=-1), vp[:, cols]))
        return self.out_proj(T.concat(heads_out, axis=1))


def _ring_bias(heads: int, frames: int, levels: int, points: int) -> np.ndarray:
    """Initial sampling offsets: per head a distinct direction on the unit
    ring (scaled to the surrounding cell ring), point k pushed k+1 cells out.
    Identical for every frame and level."""
    angles = 2.0 * math.pi * np.arange(heads) / heads
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=-1)
    dirs = dirs / np.abs(dirs).max(axis=-1, keepdims=True)
    scale = np.arange(1, points + 1).reshape(1, 1, 1, points, 1)
    bias = dirs.reshape(heads, 1, 1, 1, 2) * scale  # [M,1,1,K,2]
    bias = np.broadcast_to(bias, (heads, frames, levels, points, 2))
    return bias.reshape(-1).copy()


class DeformableAttention(Module):
    """Deformable sampling attention over L feature levels and T frames.

    Offsets and weight logits are affine in the query; weights are softmax
    normalized per (query, head) over the entire sample set: L*K samples in
    the single-frame path, T*L*K in the multi-frame path. Offsets are in
    level-pixel units, applied after the reference point is rescaled into
    each level's grid. Sampling outside a map reads zeros.
    """

    def __init__(self, rng: np.random.Generator, config: AttentionConfig,
                 frames: int | None = None):
        super().__init__()
        self.cfg = config
        self.frames = config.frames if frames is None else frames
        if self.frames < 1:
            raise ConfigError(f"frames must be >= 1, got {self.frames}")
        d, M, L, K = config.d_model, config.heads, config.levels, config.points
        self.d_head = d // M
        n_samples = M * self.frames * L * K
        self.value_proj = Linear(rng, d, d)
        self.out_proj = Linear(rng, d, d)
        self.offset_head = Linear(rng, d, n_samples * 2, zero_init=True)
        self.offset_head.bias = Tensor(_ring_bias(M, self.frames, L, K),
                                       requires_grad=True)
        self.weight_head = Linear(rng, d, n_samples, zero_init=True)

    def _check_memories(self, memories: Sequence[Sequence[Tensor]],
                        level_shapes: Sequence[tuple[int, int]]) -> None:
        L = self.cfg.levels
        if len(memories) != self.frames:
            raise ConfigError(f"expected {self.frames} frame memories, got {len(memories)}")
        if len(level_shapes) != L:
            raise ConfigError(f"expected {L} level shapes, got {len(level_shapes)}")
        for l in range(L - 1):
            if level_shapes[l + 1][0] > level_shapes[l][0]:
                raise ConfigError(f"levels must coarsen: shapes {level_shapes}")
        for t, frame in enumerate(memories):
            if len(frame) != L:
                raise ConfigError(f"frame {t} has {len(frame)} levels, expected {L}")
            for l, m in enumerate(frame):
                H, W = level_shapes[l]
                if m.shape != (H, W, self.cfg.d_model):
                    raise ConfigError(f"frame {t} level {l} map is {m.shape}, "
                                      f"expected {(H, W, self.cfg.d_model)}")

    def _phi(self, refs: Tensor, level_shape: tuple[int, int]) -> Tensor:
        H, W = level_shape
        return refs * Tensor(np.array([float(W), float(H)])) - 0.5

    def __call__(self, queries: Tensor, memories: Sequence[Sequence[Tensor]],
                 level_shapes: Sequence[tuple[int, int]], refs: Tensor,
                 force_general: bool = False) -> Tensor:
        self._check_memories(memories, level_shapes)
        if refs.shape != (queries.shape[0], 2):
            raise ShapeError(f"refs shape {refs.shape} does not match "
                             f"{queries.shape[0]} queries")
        if self.frames == 1 and not force_general:
            return self._forward_single(queries, memories[0], level_shapes, refs)
        return self._forward_multi(queries, memories, level_shapes, refs)

    def _head_values(self, frame: Sequence[Tensor],
                     level_shapes) -> list[list[Tensor]]:
        """Project one frame's maps and split channels per head."""
        M = self.cfg.heads
        out = []
        for l, m in enumerate(frame):
            H, W = level_shapes[l]
            flat = self.value_proj(m.reshape(H * W, self.cfg.d_model))
            vm = flat.reshape(H, W, self.cfg.d_model)
            out.append([vm[:, :, h * self.d_head:(h + 1) * self.d_head]
                        for h in range(M)])
        return out

    def _forward_single(self, queries, frame, level_shapes, refs) -> Tensor:
        cfg = self.cfg
        Nq, M, L, K = queries.shape[0], cfg.heads, cfg.levels, cfg.points
        offsets = self.offset_head(queries).reshape(Nq, M, L, K, 2)
        logits = self.weight_head(queries).reshape(Nq, M, L * K)
        weights = T.softmax(logits, axis=-1).reshape(Nq, M, L, K)
        values = self._head_values(frame, level_shapes)
        heads = []
        for m in range(M):
            acc = None
            for l in range(L):
                base = self._phi(refs, level_shapes[l]).reshape(Nq, 1, 2)
                pts = (base + offsets[:, m, l]).reshape(Nq * K, 2)
                sampled = T.bilinear_sample(values[l][m], pts).reshape(Nq, K, self.d_head)
                term = (sampled * weights[:, m, l].reshape(Nq, K, 1)).sum(axis=1)
                acc = term if acc is None else acc + term
            heads.append(acc)
        return self.out_proj(T.concat(heads, axis=1))

    def _forward_multi(self, queries, memories, level_shapes, refs) -> Tensor:
        cfg = self.cfg
        Nq, M, L, K = queries.shape[0], cfg.heads, cfg.levels, cfg.points
        Tn = self.frames
        offsets = self.offset_head(queries).reshape(Nq, M, Tn, L, K, 2)
        logits = self.weight_head(queries).reshape(Nq, M, Tn * L * K)
        weights = T.softmax(logits, axis=-1).reshape(Nq, M, Tn, L, K)
        values = [self._head_values(frame, level_shapes) for frame in memories]
        heads = []
        for m in range(M):
            acc = None
            for t in range(Tn):
                for l in range(L):
                    base = self._phi(refs, level_shapes[l]).reshape(Nq, 1, 2)
                    pts = (base + offsets[:, m, t, l]).reshape(Nq * K, 2)
                    sampled = T.bilinear_sample(values[t][l][m], pts).reshape(
                        Nq, K, self.d_head)
                    term = (sampled * weights[:, m, t, l].reshape(Nq, K, 1)).sum(axis=1)
                    acc = term if acc is None else acc + term
            heads.append(acc)
        return self.out_proj(T.concat(heads, axis=1))

    def sampling_weights(self, queries: Tensor) -> np.ndarray:
        """Normalized sampling weights [N_q, M, T*L*K]; diagnostics and tests."""
        cfg = self.cfg
        n = cfg.heads * self.frames * cfg.levels * cfg.points
        with T.no_grad():
            logits = self.weight_head(queries.detach()).reshape(
                queries.shape[0], cfg.heads, n // cfg.heads)
            return T.softmax(logits, axis=-1).data
