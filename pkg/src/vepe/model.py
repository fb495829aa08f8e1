"""Full model: per-frame spatial stage feeding the temporal stage.

The temporal stage sees one keyframe plus its adjacent frames. At clip
boundaries the missing neighbour is replaced by the keyframe itself, the
same convention the cross-frame encoder uses for short windows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .module import Module
from .spatial import SpatialPoseSet, SpatialStage, image_to_tensor
from .temporal import TemporalPoseResult, TemporalStage
from .tensor import Tensor, no_grad


@dataclass
class FrameFeatures:
    maps: list                 # encoder memory per level
    shapes: list               # (H_l, W_l) per level
    pose_set: SpatialPoseSet


@dataclass
class ClipResult:
    key_idx: int
    ref_indices: list
    frames: dict               # frame index -> FrameFeatures
    temporal: TemporalPoseResult


def reference_indices(t: int, n_frames: int) -> list:
    return [t - 1 if t > 0 else t, t + 1 if t < n_frames - 1 else t]


class VepeModel(Module):
    def __init__(self, cfg: RunConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        att = cfg.attention_config()
        self.spatial = SpatialStage(rng, att, n_queries=cfg.n_queries,
                                    n_joints=cfg.n_joints,
                                    enc_layers=cfg.enc_layers,
                                    dec_layers=cfg.dec_layers)
        self.temporal = TemporalStage(rng, att, n_queries=cfg.n_queries,
                                      n_joints=cfg.n_joints,
                                      stpe_layers=cfg.stpe_layers,
                                      stdme_layers=cfg.stdme_layers,
                                      stpd_layers=cfg.stpd_layers,
                                      use_mask=cfg.use_mask,
                                      use_stdme=cfg.use_stdme,
                                      use_stpd=cfg.use_stpd,
                                      threshold=cfg.threshold,
                                      min_keep=cfg.min_keep)

    def forward_frame(self, frame: np.ndarray) -> FrameFeatures:
        maps, shapes, pose_set = self.spatial(image_to_tensor(frame))
        return FrameFeatures(maps=maps, shapes=shapes, pose_set=pose_set)

    def forward_clip(self, frames: np.ndarray, key_idx: int,
                     freeze_spatial: bool = False,
                     cache: dict | None = None) -> ClipResult:
        """Run the spatial stage on the keyframe and its neighbours, then the
        temporal stage on the keyframe. ``cache`` (frame index -> features)
        lets callers reuse spatial passes across keyframes of one clip; it is
        only sound while the spatial weights do not change."""
        n = len(frames)
        if not 0 <= key_idx < n:
            raise ValueError(f"key index {key_idx} outside clip of {n} frames")
        # The cross-frame window holds cfg.frames entries including the key,
        # so a degenerate one-frame window takes no references at all.
        refs = reference_indices(key_idx, n)[:max(0, self.cfg.frames - 1)]
        feats = cache if cache is not None else {}
        for t in dict.fromkeys([key_idx] + refs):
            if t not in feats:
                if freeze_spatial:
                    with no_grad():
                        feats[t] = self.forward_frame(frames[t])
                else:
                    feats[t] = self.forward_frame(frames[t])
        key = feats[key_idx]
        temporal = self.temporal(
            key.pose_set, key.maps, key.shapes,
            ref_sets=[feats[t].pose_set for t in refs],
            ref_memories=[feats[t].maps for t in refs])
        return ClipResult(key_idx=key_idx, ref_indices=refs,
                          frames=feats, temporal=temporal)
