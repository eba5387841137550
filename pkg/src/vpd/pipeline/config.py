"""Run configuration: one flat record shared by training, evaluation, and the CLI."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from ..losses import LossConfig
from ..unet import UNetConfig

TASKS = ("mvs", "ssc")
LOSSES = ("regression", "classification", "unification")


@dataclass(frozen=True)
class RunConfig:
    task: str = "mvs"
    loss: str = "classification"
    use_cvp: bool = True
    use_cacc: bool = True
    use_of: bool = True
    filter_mode: str = "one_hot"
    reverse_steps: int = 4
    T: int = 1000
    schedule: str = "linear"
    beta_start: float = 1e-4
    beta_end: float = 0.02
    lr: float = 2.5e-5
    steps: int = 2000
    batch_size: int = 1
    weight_decay: float = 0.0
    seed: int = 0
    sample_seed: int = 0
    base_channels: int = 16
    multipliers: tuple[int, int, int] = (1, 2, 4)
    time_dim: int = 32
    groups: int = 8
    smooth_l1_beta: float = 1.0
    focal_gamma: float = 2.0
    unify_alpha: float = 0.75
    unify_gamma: float = 2.0
    unify_b: float = 2.718281828459045
    semantic_weight: float = 1.0
    dataset: str = "default"
    out_dir: str = "runs"

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.reverse_steps < 1:
            raise ValueError(f"reverse steps must be >= 1, got {self.reverse_steps}")
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch size >= 1")
        object.__setattr__(self, "multipliers", tuple(self.multipliers))
        self.loss_config()  # validates the loss hyperparameters

    def loss_config(self) -> LossConfig:
        return LossConfig(self.smooth_l1_beta, self.focal_gamma, self.unify_alpha,
                          self.unify_gamma, self.unify_b)

    def unet_config(self, depth: int, height: int, width: int, context_channels: int) -> UNetConfig:
        return UNetConfig(self.base_channels, self.multipliers, depth, height, width,
                          self.time_dim, self.groups, context_channels, self.seed)

    def replace(self, **changes) -> "RunConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["multipliers"] = list(self.multipliers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown run config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def desk_preset(**changes) -> RunConfig:
    """Narrower network and a larger step size so 2000 steps fit in minutes on one core."""
    base = RunConfig(base_channels=8, groups=4, lr=1e-3)
    return base.replace(**changes)
