"""Run configuration: desk-scale defaults, JSON loading with unknown-key
rejection, and dotted-path overrides (file < CLI).

Defaults mirror the reference hyperparameter tables scaled down to a
CPU-sized run; PAPER_SCALE records the table values next to the desk
values in every manifest echo.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .world import ACTION_ARITY

PAPER_SCALE = {
    "encoder": {"K": "31-63 per environment", "d_z": 256, "iters": 3, "lr": 4e-4,
                "batch": 64, "epochs": 15, "data_size": 1_000_000,
                "image_hw": 224, "patch_size": 16},
    "wm": {"d_state": 64, "layers": 2, "model_size": 512, "heads": 8,
           "d_conv": 4, "lr": 1e-4, "batch": 32},
    "disentangler": {"d_c": 256, "d_v": 256},
}


@dataclass
class EnvConfig:
    image_hw: int = 64
    episodes: int = 2000
    max_steps: int = 64
    policy: str = "scripted"

    def validate(self):
        if self.image_hw < 16 or self.image_hw % 8:
            raise ValueError(f"env.image_hw must be a multiple of 8 >= 16, got {self.image_hw}")
        if self.policy not in ("scripted", "random"):
            raise ValueError(f"env.policy must be scripted|random, got {self.policy}")
        if self.episodes < 1 or self.max_steps < 2:
            raise ValueError("env.episodes >= 1 and env.max_steps >= 2 required")


@dataclass
class FeaturizerConfig:
    patch_size: int = 8
    feature_dim: int = 192  # patch_size^2 * 3: exactly invertible codec

    def validate(self):
        if self.feature_dim > self.patch_size * self.patch_size * 3:
            raise ValueError("featurizer.feature_dim exceeds patch dimension")


@dataclass
class EncoderConfig:
    K: int = 7
    d_z: int = 64
    iters: int = 3
    hidden: int = 128
    lr: float = 4e-4
    batch: int = 32
    total_updates: int = 6000
    attn_eps: float = 1e-8

    def validate(self):
        if self.K < 2:
            raise ValueError("encoder.K must be >= 2 (background + objects)")
        if self.iters < 1 or self.total_updates < 1 or self.lr <= 0:
            raise ValueError("encoder.iters/total_updates/lr out of range")


@dataclass
class WMConfig:
    d_state: int = 16
    layers: int = 2
    heads: int = 2
    hidden: int = 128
    d_conv: int = 4  # recorded from the reference tables; unused by the simplified SSM
    lr: float = 1e-4
    batch: int = 16
    horizon: int = 10
    context: int = 4
    rollout_steps: int = 10
    updates: int = 10000
    disentangle: bool = True
    slots_source: str = "encoder"  # "patches" = every patch feature treated as a slot

    def validate(self):
        if self.layers < 1 or self.d_state < 1 or self.heads < 1:
            raise ValueError("wm.layers/d_state/heads must be >= 1")
        if self.horizon < 2:
            raise ValueError("wm.horizon must be >= 2")
        if self.slots_source not in ("encoder", "patches"):
            raise ValueError(f"wm.slots_source must be encoder|patches, got {self.slots_source}")


@dataclass
class DisentanglerConfig:
    d_c: int = 64
    d_v: int = 64
    hidden: int = 128
    tau: float = 0.1
    lecam_weight: float = 0.01
    ema_decay: float = 0.99
    lr: float = 1e-4
    interleave: str = "batch"  # or "epoch"

    def validate(self):
        if self.tau <= 0:
            raise ValueError("disentangler.tau must be positive")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError("disentangler.ema_decay must lie in [0, 1]")
        if self.interleave not in ("batch", "epoch"):
            raise ValueError(f"disentangler.interleave must be batch|epoch, got {self.interleave}")


@dataclass
class EvalConfig:
    bins: int = 10
    probe_transitions: int = 2000
    probe_seeds: int = 3
    heldout_episodes: int = 100
    fg_ari_frames: int = 200

    def validate(self):
        if self.bins != 10:
            raise ValueError("eval.bins is fixed at 10 by the probing protocol")
        if self.probe_seeds < 1:
            raise ValueError("eval.probe_seeds must be >= 1")


@dataclass
class Config:
    seed: int = 0
    env: EnvConfig = field(default_factory=EnvConfig)
    featurizer: FeaturizerConfig = field(default_factory=FeaturizerConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    wm: WMConfig = field(default_factory=WMConfig)
    disentangler: DisentanglerConfig = field(default_factory=DisentanglerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        for section in (self.env, self.featurizer, self.encoder, self.wm,
                        self.disentangler, self.eval):
            section.validate()
        if self.env.image_hw % self.featurizer.patch_size:
            raise ValueError("env.image_hw must be divisible by featurizer.patch_size")
        return self

    def to_dict(self):
        return asdict(self)

    @property
    def action_arity(self):
        return ACTION_ARITY


_SECTIONS = {
    "env": EnvConfig,
    "featurizer": FeaturizerConfig,
    "encoder": EncoderConfig,
    "wm": WMConfig,
    "disentangler": DisentanglerConfig,
    "eval": EvalConfig,
}


def config_from_dict(data):
    """Build a Config from a plain dict, rejecting unknown keys anywhere."""
    if not isinstance(data, dict):
        raise ValueError("config root must be a JSON object")
    unknown = set(data) - (set(_SECTIONS) | {"seed"})
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    cfg = Config(seed=int(data.get("seed", 0)))
    for name, cls in _SECTIONS.items():
        payload = data.get(name, {})
        if not isinstance(payload, dict):
            raise ValueError(f"config section {name} must be an object")
        valid = {f.name for f in fields(cls)}
        bad = set(payload) - valid
        if bad:
            raise ValueError(f"unknown keys in config.{name}: {sorted(bad)}")
        setattr(cfg, name, cls(**payload))
    return cfg.validate()


def load_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_dict(json.load(fh))


def _coerce(current, raw):
    if isinstance(current, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"expected boolean, got {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw


def apply_override(cfg, spec):
    """Apply one ``section.key=value`` (or ``seed=value``) override in place."""
    if "=" not in spec:
        raise ValueError(f"override must look like section.key=value, got {spec!r}")
    path, raw = spec.split("=", 1)
    if path == "seed":
        cfg.seed = int(raw)
        return cfg
    if "." not in path:
        raise ValueError(f"override path must be dotted, got {path!r}")
    section_name, key = path.split(".", 1)
    if section_name not in _SECTIONS:
        raise ValueError(f"unknown config section {section_name!r}")
    section = getattr(cfg, section_name)
    if not hasattr(section, key):
        raise ValueError(f"unknown config key {path!r}")
    setattr(section, key, _coerce(getattr(section, key), raw))
    return cfg


def echo_config(cfg):
    """Manifest stanza: the desk values actually used plus the table-scale
    values they stand in for."""
    return {"desk": cfg.to_dict(), "paper_scale": PAPER_SCALE}
