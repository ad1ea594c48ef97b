"""Per-stage optimiser settings and closed-form learning-rate schedules.

Epochs are 1-based. ``epoch_scale`` divides every epoch count (desk runs use
4), keeping the schedule shape intact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import torch

ADAM_BETAS = (0.5, 0.999)
SGD_MOMENTUM = 0.9


@dataclass(frozen=True)
class StageSchedule:
    stage: int
    rates: dict  # block -> initial learning rate
    optimizers: dict  # block -> "sgd" | "adam"
    epochs: float
    decay: str  # "step" | "linear"
    step_every: float = 40.0
    step_factor: float = 0.1
    constant_epochs: float = 0.0
    freeze: frozenset = field(default_factory=frozenset)
    freeze_encoder_bn: bool = False
    weight_decay: float = 5e-4

    def __post_init__(self):
        if self.decay not in ("step", "linear"):
            raise ValueError(f"unknown decay {self.decay!r}")
        if set(self.rates) != set(self.optimizers):
            raise ValueError("rates and optimizers must name the same blocks")
        for block, lr in self.rates.items():
            if not (math.isfinite(lr) and lr >= 0):
                raise ValueError(f"learning rate for {block} must be >= 0")
        for kind in self.optimizers.values():
            if kind not in ("sgd", "adam"):
                raise ValueError(f"unknown optimizer {kind!r}")

    @property
    def total_epochs(self):
        return int(math.ceil(self.epochs - 1e-9))

    def factor(self, epoch):
        """Multiplier on the initial rate during ``epoch`` (1-based)."""
        if epoch < 1:
            raise ValueError("epochs are 1-based")
        if self.decay == "step":
            return self.step_factor ** math.floor((epoch - 1) / self.step_every + 1e-9)
        over = epoch - self.constant_epochs
        if over <= 0:
            return 1.0
        return max(0.0, 1.0 - over / (self.epochs - self.constant_epochs))

    def lr(self, block, epoch):
        return self.rates[block] * self.factor(epoch)

    def scaled(self, epoch_scale):
        if epoch_scale <= 0:
            raise ValueError("epoch_scale must be positive")
        return replace(
            self,
            epochs=self.epochs / epoch_scale,
            step_every=self.step_every / epoch_scale,
            constant_epochs=self.constant_epochs / epoch_scale,
        )

    def with_rates(self, **rates):
        unknown = set(rates) - set(self.rates)
        if unknown:
            raise ValueError(f"stage {self.stage} has no blocks {sorted(unknown)}")
        return replace(self, rates={**self.rates, **rates})


def stage1_schedule():
    return StageSchedule(
        stage=1, rates={"E": 0.01, "V": 0.1}, optimizers={"E": "sgd", "V": "sgd"},
        epochs=80, decay="step", step_every=40, step_factor=0.1,
    )


def stage2_schedule():
    return StageSchedule(
        stage=2, rates={"G": 1e-3, "D_id": 1e-4, "D_pd": 1e-2},
        optimizers={"G": "adam", "D_id": "sgd", "D_pd": "sgd"},
        epochs=100, decay="linear", constant_epochs=50, freeze=frozenset({"E", "V"}),
    )


def stage3_schedule():
    return StageSchedule(
        stage=3, rates={"E": 1e-6, "G": 1e-6, "V": 1e-5, "D_id": 1e-4, "D_pd": 1e-4},
        optimizers={"E": "adam", "G": "adam", "V": "adam", "D_id": "sgd", "D_pd": "sgd"},
        epochs=50, decay="linear", constant_epochs=25, freeze_encoder_bn=True,
    )


DEFAULT_SCHEDULES = {1: stage1_schedule, 2: stage2_schedule, 3: stage3_schedule}


def default_schedule(stage, epoch_scale=1.0):
    sched = DEFAULT_SCHEDULES[stage]()
    return sched if epoch_scale == 1.0 else sched.scaled(epoch_scale)


def build_optimizer(kind, params, lr, weight_decay=0.0):
    params = [p for p in params if p.requires_grad]
    if kind == "adam":
        return torch.optim.Adam(params, lr=lr, betas=ADAM_BETAS)
    return torch.optim.SGD(params, lr=lr, momentum=SGD_MOMENTUM, weight_decay=weight_decay)


def set_lr(optimizer, lr):
    for group in optimizer.param_groups:
        group["lr"] = lr
