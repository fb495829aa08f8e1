"""Per-frame stage: convolutional feature pyramid, deformable self-attention
encoder over multi-scale tokens, and a set-prediction pose decoder.

All transformer sublayers are pre-norm (x + sublayer(norm(x))), so a
sublayer whose output is zero passes its input through bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, DeformableAttention, MultiHeadAttention
from .module import Embedding, FeedForward, LayerNorm, Linear, Module, ModuleList
from .tensor import ConfigError, Tensor

BACKBONE_CHANNELS = (16, 24, 32, 40)
STRIDES = (4, 8, 16)


@dataclass
class SpatialPoseSet:
    pose_queries: Tensor      # [N, d_model]
    keypoints: Tensor         # [N, K_j, 2], sigmoid-bounded
    scores: Tensor            # [N], sigmoid-bounded
    score_logits: Tensor      # [N], pre-sigmoid confidence
    reference_points: np.ndarray  # [N, 2], mean keypoint per query


def sinusoidal_2d(H: int, W: int, d_model: int) -> np.ndarray:
    """Fixed 2-d position code [H, W, d]: half the channels encode x, half y."""
    half = d_model // 2
    freqs = np.exp(-np.log(10000.0) * (np.arange(half // 2) / max(half // 2, 1)))
    ys = (np.arange(H) + 0.5) / H
    xs = (np.arange(W) + 0.5) / W
    enc = np.zeros((H, W, d_model))
    ang_x = xs[None, :, None] * freqs * 2 * np.pi
    ang_y = ys[:, None, None] * freqs * 2 * np.pi
    enc[:, :, 0:half:2] = np.broadcast_to(np.sin(ang_x), (H, W, half // 2))
    enc[:, :, 1:half:2] = np.broadcast_to(np.cos(ang_x), (H, W, half // 2))
    enc[:, :, half::2] = np.broadcast_to(np.sin(ang_y), (H, W, half // 2))
    enc[:, :, half + 1::2] = np.broadcast_to(np.cos(ang_y), (H, W, half // 2))
    return enc


class Conv3x3(Module):
    """3x3 convolution, stride 2, GELU; runs as im2col + matmul."""

    def __init__(self, rng, c_in: int, c_out: int):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.proj = Linear(rng, 9 * c_in, c_out)

    def __call__(self, x: Tensor) -> Tensor:
        H, W, _ = x.shape
        patches = T.extract_patches(x, 3, 3, 2, 1)
        out = T.gelu(self.proj(patches))
        return out.reshape((H + 1) // 2, (W + 1) // 2, self.c_out)


class EncoderLayer(Module):
    """Deformable self-attention over flattened multi-scale tokens."""

    def __init__(self, rng, cfg: AttentionConfig):
        super().__init__()
        self.attn = DeformableAttention(rng, cfg, frames=1)
        self.ffn = FeedForward(rng, cfg.d_model, cfg.ffn_width)
        self.norm_attn = LayerNorm(cfg.d_model)
        self.norm_ffn = LayerNorm(cfg.d_model)

    def __call__(self, tokens: Tensor, maps, shapes, refs: Tensor) -> Tensor:
        tokens = tokens + self.attn(self.norm_attn(tokens), [maps], shapes, refs)
        return tokens + self.ffn(self.norm_ffn(tokens))


class DecoderLayer(Module):
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


class SpatialStage(Module):
    """Backbone + encoder + decoder producing a fixed-size pose set."""

    def __init__(self, rng, att_cfg: AttentionConfig, n_queries: int = 100,
                 n_joints: int = 15, enc_layers: int = 3, dec_layers: int = 3):
        super().__init__()
        if att_cfg.levels != len(STRIDES):
            raise ConfigError(f"spatial stage builds {len(STRIDES)} levels, "
                              f"config asks for {att_cfg.levels}")
        self.cfg = att_cfg
        self.n_queries = n_queries
        self.n_joints = n_joints
        c = BACKBONE_CHANNELS
        self.convs = ModuleList([Conv3x3(rng, 3, c[0]),
                                 Conv3x3(rng, c[0], c[1]),
                                 Conv3x3(rng, c[1], c[2]),
                                 Conv3x3(rng, c[2], c[3])])
        self.laterals = ModuleList([Linear(rng, c[1], att_cfg.d_model),
                                    Linear(rng, c[2], att_cfg.d_model),
                                    Linear(rng, c[3], att_cfg.d_model)])
        self.level_embed = Embedding(rng, len(STRIDES), att_cfg.d_model, scale=0.02)
        self.encoder = ModuleList([EncoderLayer(rng, att_cfg)
                                   for _ in range(enc_layers)])
        self.decoder = ModuleList([DecoderLayer(rng, att_cfg, n_joints)
                                   for _ in range(dec_layers)])
        self.query_embed = Embedding(rng, n_queries, att_cfg.d_model, scale=1.0)
        self.kp_init = Linear(rng, att_cfg.d_model, n_joints * 2)
        self.score_head = Linear(rng, att_cfg.d_model, 1, zero_init=True, bias_init=-2.0)
        self._pos_cache: dict = {}

    # -- features ---------------------------------------------------------

    def positional_encoding(self, level: int, shape) -> np.ndarray:
        key = (level, shape)
        if key not in self._pos_cache:
            self._pos_cache[key] = sinusoidal_2d(shape[0], shape[1],
                                                 self.cfg.d_model)
        return self._pos_cache[key]

    def extract_features(self, image: Tensor):
        """[H, W, 3] image -> (maps per level, level shapes)."""
        H, W, _ = image.shape
        if H % STRIDES[-1] or W % STRIDES[-1]:
            raise ConfigError(f"image size {H}x{W} must be a multiple "
                              f"of {STRIDES[-1]}")
        x = self.convs[0](image)
        feats = []
        for conv in self.convs[1:]:
            x = conv(x)
            feats.append(x)
        maps = []
        shapes = []
        for level, feat in enumerate(feats):
            h, w, c = feat.shape
            lat = self.laterals[level](feat.reshape(h * w, c))
            pos = self.positional_encoding(level, (h, w)).reshape(h * w, -1)
            lat = lat + Tensor(pos) + self.level_embed([level])
            maps.append(lat.reshape(h, w, self.cfg.d_model))
            shapes.append((h, w))
        return maps, shapes

    # -- encoder ------------------------------------------------------------

    @staticmethod
    def token_references(shapes) -> np.ndarray:
        """Cell-center (x, y) in [0,1] for every flattened token."""
        refs = []
        for h, w in shapes:
            xs = (np.arange(w) + 0.5) / w
            ys = (np.arange(h) + 0.5) / h
            gx, gy = np.meshgrid(xs, ys)
            refs.append(np.stack([gx.ravel(), gy.ravel()], axis=1))
        return np.concatenate(refs, axis=0)

    def encode(self, maps, shapes):
        if len(self.encoder) == 0:
            return maps
        d = self.cfg.d_model
        tokens = T.concat([m.reshape(s[0] * s[1], d)
                           for m, s in zip(maps, shapes)], axis=0)
        refs = Tensor(self.token_references(shapes))
        for layer in self.encoder:
            grids = self._split_tokens(tokens, shapes)
            tokens = layer(tokens, grids, shapes, refs)
        return self._split_tokens(tokens, shapes)

    def _split_tokens(self, tokens: Tensor, shapes):
        maps = []
        offset = 0
        for h, w in shapes:
            maps.append(tokens[offset:offset + h * w, :].reshape(h, w, -1))
            offset += h * w
        return maps

    # -- decoder ------------------------------------------------------------

    def decode(self, maps, shapes) -> SpatialPoseSet:
        q = self.query_embed(np.arange(self.n_queries))
        keypoints = T.sigmoid(self.kp_init(q)).reshape(
            self.n_queries, self.n_joints, 2)
        for layer in self.decoder:
            q, keypoints = layer(q, maps, shapes, keypoints)
        logits = self.score_head(q).reshape(self.n_queries)
        return SpatialPoseSet(pose_queries=q, keypoints=keypoints,
                              scores=T.sigmoid(logits), score_logits=logits,
                              reference_points=keypoints.data.mean(axis=1))

    def __call__(self, image: Tensor):
        maps, shapes = self.extract_features(image)
        maps = self.encode(maps, shapes)
        return maps, shapes, self.decode(maps, shapes)


def image_to_tensor(frame: np.ndarray) -> Tensor:
    """uint8 [H, W, 3] -> float tensor in [0, 1]."""
    return Tensor(frame.astype(np.float64) / 255.0)
