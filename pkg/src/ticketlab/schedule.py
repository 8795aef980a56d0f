"""Per-epoch learning rate: linear warmup, then cosine annealing."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass


@dataclass
class ScheduleConfig:
    eta_start: float = 1e-6
    eta_base: float = 2e-4
    eta_min: float = 1e-6
    epochs: int = 120
    warmup: int = 15

    def __post_init__(self):
        if not 0 <= self.eta_min <= self.eta_base:
            raise ValueError("need 0 <= eta_min <= eta_base")
        if not 0 <= self.eta_start <= self.eta_base:
            raise ValueError("need 0 <= eta_start <= eta_base")
        if not 0 < self.warmup < self.epochs:
            raise ValueError(f"need 0 < warmup < epochs, got warmup={self.warmup}, epochs={self.epochs}")

    @classmethod
    def from_dict(cls, d: dict) -> "ScheduleConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(t: int, cfg: ScheduleConfig) -> float:
    """Rate at epoch index ``t`` in ``[0, epochs]``.

    Warmup reaches ``eta_base`` at ``t = warmup - 1``; the cosine branch starts
    at ``eta_base`` for ``t = warmup`` and ends at ``eta_min`` for ``t = epochs``.
    """
    j, jw = cfg.epochs, cfg.warmup
    if not 0 <= t <= j:
        raise ValueError(f"epoch index {t} outside [0, {j}]")
    if t < jw:
        if jw == 1:
            return cfg.eta_start
        return cfg.eta_start + t / (jw - 1) * (cfg.eta_base - cfg.eta_start)
    return cfg.eta_min + 0.5 * (cfg.eta_base - cfg.eta_min) * (1 + math.cos((t - jw) * math.pi / (j - jw)))


def cosine_decay(t: int, n: int, eta_hi: float, eta_lo: float) -> float:
    """Warmup-free cosine from ``eta_hi`` (t=0) towards ``eta_lo`` over ``n`` epochs."""
    if n <= 1:
        return eta_hi
    return eta_lo + 0.5 * (eta_hi - eta_lo) * (1 + math.cos(t * math.pi / n))
