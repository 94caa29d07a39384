"""Training configuration and its canonical hash."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace

from .errors import ConfigError
from .geometry import WARP_MODES
from .segmenter import Architecture

# loss variants, one per ablation row (the baseline row is lam == 0)
VARIANTS = ("uniform", "label", "pixel", "combined", "ce", "combined+ce")


@dataclass(frozen=True)
class TrainConfig:
    phase1_steps: int = 2000
    phase2_steps: int = 2000
    labeled_per_step: int = 4
    pairs_per_step: int = 4
    lam: float = 1.0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warp_mode: str = "forward_splat"
    variant: str = "combined"
    mix: tuple[float, float, float] = (0.2, 0.4, 0.4)
    edge_threshold: float = 0.1
    sigma_rot: float = 0.0
    sigma_trans: float = 0.0
    sigma_depth: float = 0.0
    noise_seed: int = 0
    seed: int = 0
    widths: tuple[int, ...] = (16, 32, 32)
    kernels: tuple[int, ...] = (3, 3, 3)
    eval_scene_fraction: float = 0.2
    log_every: int = 10

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(x) for x in self.widths))
        object.__setattr__(self, "kernels", tuple(int(x) for x in self.kernels))
        object.__setattr__(self, "mix", tuple(float(x) for x in self.mix))
        if self.phase1_steps < 0 or self.phase2_steps < 0:
            raise ConfigError("step counts must be nonnegative")
        if self.labeled_per_step < 1 or self.pairs_per_step < 0:
            raise ConfigError("need >= 1 labeled frame and >= 0 pairs per step")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.warp_mode not in WARP_MODES:
            raise ConfigError(f"warp_mode must be one of {WARP_MODES}")
        if self.lam < 0:
            raise ConfigError("lam must be nonnegative")
        if min(self.sigma_rot, self.sigma_trans, self.sigma_depth) < 0:
            raise ConfigError("perturbation sigmas must be nonnegative")
        if len(self.mix) != 3:
            raise ConfigError("mix needs three weights")
        if not 0 < self.eval_scene_fraction < 1:
            raise ConfigError("eval_scene_fraction must be in (0, 1)")
        if self.log_every < 1:
            raise ConfigError("log_every must be positive")

    def architecture(self, num_classes: int) -> Architecture:
        return Architecture(self.widths, self.kernels, num_classes)

    def mix_dict(self) -> dict[str, float]:
        return dict(zip(("uniform", "label", "pixel"), self.mix))

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        extra = set(d) - names
        if extra:
            raise ConfigError(f"unknown train config keys: {sorted(extra)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


def config_hash(*parts: dict) -> str:
    blob = json.dumps(list(parts), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class ExperimentConfig:
    """One JSON document: scene generation, training, and protocol knobs."""

    scene: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    dataset_seed: int = 0
    fractions: tuple[float, ...] = (0.005, 0.01, 0.02, 0.04)
    seeds: tuple[int, ...] = (0, 1, 2)
    ablation_fraction: float = 0.005
    frequency_seeds: tuple[int, ...] = (0, 1, 2, 3, 4)

    def to_dict(self) -> dict:
        return {"scene": self.scene, "train": self.train, "dataset_seed": self.dataset_seed,
                "fractions": list(self.fractions), "seeds": list(self.seeds),
                "ablation_fraction": self.ablation_fraction,
                "frequency_seeds": list(self.frequency_seeds)}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        extra = set(d) - {"scene", "train", "dataset_seed", "fractions", "seeds",
                          "ablation_fraction", "frequency_seeds"}
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        out = cls(dict(d.get("scene", {})), dict(d.get("train", {})), int(d.get("dataset_seed", 0)),
                  tuple(float(f) for f in d.get("fractions", cls.fractions)),
                  tuple(int(s) for s in d.get("seeds", cls.seeds)),
                  float(d.get("ablation_fraction", 0.005)),
                  tuple(int(s) for s in d.get("frequency_seeds", cls.frequency_seeds)))
        for f in out.fractions:
            if not 0 < f <= 1:
                raise ConfigError(f"fraction {f} outside (0, 1]")
        out.train_config()
        out.scene_config()
        return out

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.train)

    def scene_config(self):
        from .scenegen import SceneConfig
        try:
            return SceneConfig.from_dict(self.scene)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
