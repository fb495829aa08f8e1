"""Flat run configuration shared by the CLI, training, and evaluation.

Defaults are load-bearing: the training schedule and model shape constants
below are asserted at startup (see ``check_documented_defaults``) so an
accidental edit of this file cannot silently change the published recipe.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

from .attention import AttentionConfig
from .synth import SynthConfig
from .tensor import ConfigError


@dataclass
class RunConfig:
    seed: int = 0
    # optimizer / schedule
    lr: float = 2e-4
    weight_decay: float = 1e-4
    batch_size: int = 8
    epochs: int = 20
    # clip and model shape
    frames: int = 3
    n_queries: int = 100
    n_joints: int = 15
    d_model: int = 64
    heads: int = 4
    levels: int = 3
    points: int = 4
    ffn_width: int = 256
    enc_layers: int = 3
    dec_layers: int = 3
    stpe_layers: int = 2
    stdme_layers: int = 2
    stpd_layers: int = 3
    # selection / losses
    threshold: float = 0.3
    min_keep: int = 5
    margin: float = 0.3
    lambda_kpt: float = 5.0
    lambda_cls: float = 2.0
    lambda_ic: float = 1.0
    tau: float = 0.1
    # ablation switches
    use_mask: bool = True
    use_stdme: bool = True
    use_stpd: bool = True
    # data
    image_size: int = 128
    persons: tuple = (2, 6)
    speed: tuple = (0.005, 0.02)
    occlusion_prob: float = 0.0
    blur: tuple = (0.0, 0.0)

    def attention_config(self) -> AttentionConfig:
        return AttentionConfig(d_model=self.d_model, heads=self.heads,
                               levels=self.levels, points=self.points,
                               frames=self.frames, ffn_width=self.ffn_width)

    def synth_config(self) -> SynthConfig:
        return SynthConfig(persons=tuple(self.persons), speed=tuple(self.speed),
                           occlusion_prob=self.occlusion_prob,
                           blur=tuple(self.blur), image_size=self.image_size,
                           frames=self.frames)

    def validate(self) -> None:
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be positive and weight_decay nonnegative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"threshold {self.threshold} outside [0, 1]")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.min_keep < 1 or self.margin < 0:
            raise ConfigError("min_keep must be >= 1 and margin >= 0")
        if min(self.lambda_kpt, self.lambda_cls, self.lambda_ic) < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.image_size % 16:
            raise ConfigError(f"image_size {self.image_size} must be a "
                              "multiple of 16")
        self.attention_config()
        self.synth_config()

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        raw = json.loads(text)
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(raw) - set(known))
        if unknown:
            raise ConfigError(f"unknown config fields: {unknown}")
        coerced = {}
        for name, value in raw.items():
            default = known[name].default
            coerced[name] = tuple(value) if isinstance(default, tuple) else value
        return cls(**coerced)


# The documented recipe. Keep in one place so the startup check and the
# tests agree about what must not drift.
DOCUMENTED_DEFAULTS = {
    "lr": 2e-4,
    "weight_decay": 1e-4,
    "batch_size": 8,
    "frames": 3,
    "n_queries": 100,
    "n_joints": 15,
    "stpd_layers": 3,
    "threshold": 0.3,
    "epochs": 20,
}


def check_documented_defaults() -> None:
    cfg = RunConfig()
    for name, expected in DOCUMENTED_DEFAULTS.items():
        actual = getattr(cfg, name)
        if actual != expected:
            raise ConfigError(f"default {name}={actual} drifted from the "
                              f"documented value {expected}")
