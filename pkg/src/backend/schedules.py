"""
Schedules for the BASEN toolkit
Learning-rate warmup/cosine schedule and the Gumbel temperature schedule.
"""

import math
from dataclasses import asdict, dataclass, replace
from typing import List, Tuple

import torch
from torch.optim.lr_scheduler import LambdaLR


@dataclass
class ScheduleConfig:
    max_lr: float = 2e-4
    warmup_ratio: float = 0.05
    total_epochs: int = 60
    batch_size: int = 8
    betas: Tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    grad_clip: float = 5.0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)

    def validate(self) -> List[str]:
        bad = []
        if not self.max_lr > 0:
            bad.append("max_lr")
        if not 0 < self.warmup_ratio < 1:
            bad.append("warmup_ratio")
        if self.total_epochs < 1:
            bad.append("total_epochs")
        if self.batch_size < 1:
            bad.append("batch_size")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            bad.append("betas")
        if self.weight_decay < 0:
            bad.append("weight_decay")
        if not self.grad_clip > 0:
            bad.append("grad_clip")
        return bad

    def to_dict(self) -> dict:
        data = asdict(self)
        data["betas"] = list(self.betas)
        return data


@dataclass
class TemperatureSchedule:
    """Gumbel temperature annealing; total_epochs = 0 spans the whole selector stage."""
    tau_start: float = 10.0
    tau_end: float = 0.1
    total_epochs: int = 0

    def validate(self) -> List[str]:
        bad = []
        if not self.tau_start > self.tau_end:
            bad.append("tau_start")
        if not self.tau_end > 0:
            bad.append("tau_end")
        if self.total_epochs < 0:
            bad.append("total_epochs")
        return bad

    def spanning(self, stage_epochs: int) -> "TemperatureSchedule":
        """Copy with total_epochs filled from the stage length when unset."""
        return replace(self, total_epochs=self.total_epochs or stage_epochs)


def warmup_steps(total_steps: int, warmup_ratio: float) -> int:
    return max(1, int(round(warmup_ratio * total_steps)))


def lr_at(step: int, total_steps: int, sched: ScheduleConfig) -> float:
    """Linear ramp 0 -> max_lr over the warmup, then cosine decay to 0 at total_steps."""
    if total_steps < 1:
        raise ValueError(f"total_steps must be >= 1, got {total_steps}")
    step = min(max(step, 0), total_steps)
    warmup = min(warmup_steps(total_steps, sched.warmup_ratio), total_steps)
    if step < warmup:
        return sched.max_lr * step / warmup
    if total_steps == warmup:
        return sched.max_lr if step < total_steps else 0.0
    progress = (step - warmup) / (total_steps - warmup)
    return sched.max_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def tau_at(epoch: float, sched: TemperatureSchedule) -> float:
    """Geometric interpolation from tau_start at epoch 0 to tau_end at the last epoch."""
    if sched.total_epochs < 1:
        raise ValueError("Temperature schedule needs total_epochs >= 1")
    fraction = min(max(epoch / sched.total_epochs, 0.0), 1.0)
    return sched.tau_start * (sched.tau_end / sched.tau_start) ** fraction


def make_scheduler(optimizer: torch.optim.Optimizer, total_steps: int, warmup_ratio: float) -> LambdaLR:
    """Warmup/cosine multiplier on each param group's peak lr; step k uses lr_at(k + 1)."""
    unit = ScheduleConfig(max_lr=1.0, warmup_ratio=warmup_ratio)
    return LambdaLR(optimizer, lambda step: lr_at(step + 1, total_steps, unit))
