"""Cosine schedules for learning rate, weight decay and EMA decay."""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass
class CosineSchedule:
    """Cosine curve from ``start_value`` to ``end_value``.

    The first ``warmup_steps`` steps ramp linearly from 0 to ``start_value``;
    only the learning-rate schedule uses a warmup.
    """

    start_value: float
    end_value: float
    total_steps: int
    warmup_steps: int = 0

    def __post_init__(self):
        if not self.total_steps >= self.warmup_steps >= 0:
            raise ValueError("need total_steps >= warmup_steps >= 0")

    def __call__(self, step: int) -> float:
        return cosine_value(self, step)


def cosine_value(schedule: CosineSchedule, step: int) -> float:
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    if step < schedule.warmup_steps:
        return schedule.start_value * step / schedule.warmup_steps
    span = schedule.total_steps - schedule.warmup_steps
    if span == 0:
        return schedule.end_value
    tau = (step - schedule.warmup_steps) / span
    if tau == 0.0:
        return schedule.start_value
    if tau == 1.0:
        return schedule.end_value
    return schedule.end_value + (schedule.start_value - schedule.end_value) * (1 + math.cos(math.pi * tau)) / 2


@dataclass
class ScheduleSet:
    lr: CosineSchedule
    wd: CosineSchedule
    ema: CosineSchedule

    @classmethod
    def build(cls, total_steps: int, warmup_steps: int, peak_lr: float, min_lr: float = 1e-6,
              wd_start: float = 0.04, wd_end: float = 0.4, m0: float = 0.99) -> "ScheduleSet":
        return cls(
            lr=CosineSchedule(peak_lr, min_lr, total_steps, warmup_steps),
            wd=CosineSchedule(wd_start, wd_end, total_steps),
            ema=CosineSchedule(m0, 1.0, total_steps),
        )

    def at(self, step: int) -> dict:
        return {"lr": self.lr(step), "wd": self.wd(step), "m": self.ema(step)}
