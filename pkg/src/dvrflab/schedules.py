"""Noise-path coefficients, shift rules and the DVRF weighting function.

A schedule defines the interpolation ``x_t = a(t) x_0 + b(t) eps`` between data
(t=0) and Gaussian noise (t=1).  Two families are supported: the rectified-flow
line ``(1 - t, t)`` and a variance-preserving diffusion path built from a
discrete linear-beta table.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ConfigError, DomainError

T_MIN = 0.01
T_MAX = 0.99


class ScheduleKind(str, Enum):
    RECTIFIED_FLOW = "rectified_flow"
    VP_DIFFUSION = "vp_diffusion"


class ShiftKind(str, Enum):
    ZERO = "zero"
    LINEAR_ETA = "linear_eta"
    PROGRESSIVE = "progressive"


def linear_beta_alpha_bar(n_steps: int = 1000, beta_start: float = 1e-4,
                          beta_end: float = 0.02) -> np.ndarray:
    """Cumulative products of ``1 - beta`` with a leading ``alpha_bar_0 = 1``.

    Returns an array of length ``n_steps + 1``.
    """
    betas = np.linspace(beta_start, beta_end, n_steps)
    return np.concatenate([[1.0], np.cumprod(1.0 - betas)])


@dataclass(frozen=True)
class Schedule:
    kind: ScheduleKind = ScheduleKind.RECTIFIED_FLOW
    alpha_bar_table: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "kind", ScheduleKind(self.kind))
        if self.kind is ScheduleKind.VP_DIFFUSION:
            table = self.alpha_bar_table
            if table is None:
                table = linear_beta_alpha_bar()
            table = np.asarray(table, dtype=float)
            if table.ndim != 1 or table.size < 2:
                raise ConfigError("alpha_bar_table must be a 1-d array with >= 2 entries")
            if np.any(table < 0) or np.any(table > 1) or np.any(np.diff(table) > 0):
                raise ConfigError("alpha_bar_table must be non-increasing within [0, 1]")
            table.setflags(write=False)
            object.__setattr__(self, "alpha_bar_table", table)

    @classmethod
    def rectified_flow(cls) -> "Schedule":
        return cls(ScheduleKind.RECTIFIED_FLOW)

    @classmethod
    def vp_diffusion(cls, alpha_bar_table=None) -> "Schedule":
        return cls(ScheduleKind.VP_DIFFUSION, alpha_bar_table)

    @property
    def is_rf(self) -> bool:
        return self.kind is ScheduleKind.RECTIFIED_FLOW

    def __call__(self, t: float) -> tuple[float, float, float, float]:
        return eval_schedule(self, t)

    def to_dict(self) -> dict:
        return {"kind": self.kind.value}


def _check_time(t: float) -> float:
    t = float(t)
    if not (0.0 <= t <= 1.0) or not np.isfinite(t):
        raise DomainError(f"time {t!r} outside [0, 1]")
    return t


def eval_schedule(s: Schedule, t: float) -> tuple[float, float, float, float]:
    """Return ``(a, b, a_dot, b_dot)`` at time ``t``."""
    t = _check_time(t)
    if s.kind is ScheduleKind.RECTIFIED_FLOW:
        return 1.0 - t, t, -1.0, 1.0

    # alpha_bar is piecewise linear between table nodes k / T
    table = s.alpha_bar_table
    n = table.size - 1
    pos = t * n
    k = min(int(np.floor(pos)), n - 1)
    frac = pos - k
    ab = table[k] + frac * (table[k + 1] - table[k])
    dab = (table[k + 1] - table[k]) * n
    a = np.sqrt(ab)
    b = np.sqrt(1.0 - ab)
    a_dot = dab / (2.0 * a) if a > 0 else -np.inf
    b_dot = -dab / (2.0 * b) if b > 0 else np.inf
    return float(a), float(b), float(a_dot), float(b_dot)


@dataclass(frozen=True)
class ShiftRule:
    """Shift coefficient ``c(t)`` applied to ``x0_tgt - x0_src``.

    ``progressive`` ramps eta from 0 to 1 over the optimisation; eta is
    frozen within a step, so ``c_dot`` is the derivative in ``t`` only.
    """

    kind: ShiftKind = ShiftKind.PROGRESSIVE
    eta: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", ShiftKind(self.kind))
        if not np.isfinite(self.eta) or self.eta < 0:
            raise ConfigError(f"shift eta must be non-negative, got {self.eta!r}")

    @classmethod
    def zero(cls) -> "ShiftRule":
        return cls(ShiftKind.ZERO, 0.0)

    @classmethod
    def linear(cls, eta: float = 1.0) -> "ShiftRule":
        return cls(ShiftKind.LINEAR_ETA, eta)

    @classmethod
    def progressive(cls) -> "ShiftRule":
        return cls(ShiftKind.PROGRESSIVE, 1.0)

    def __call__(self, t, k=0, n_total=1):
        return eval_shift(self, t, k, n_total)

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "eta": self.eta}


def eval_shift(r: ShiftRule, t: float, k: int = 0, n_total: int = 1) -> tuple[float, float]:
    """Return ``(c, c_dot)`` for shift rule ``r`` at time ``t`` and step ``k`` of ``n_total``."""
    t = _check_time(t)
    if r.kind is ShiftKind.ZERO:
        return 0.0, 0.0
    if r.kind is ShiftKind.LINEAR_ETA:
        return r.eta * t, float(r.eta)
    if n_total < 1 or not (0 <= k <= n_total):
        raise DomainError(f"step {k} invalid for n_total={n_total}")
    eta = k / n_total
    return eta * t, eta


def weight_dvrf(s: Schedule, r: ShiftRule, t: float, k: int = 0, n_total: int = 1,
                mode: str = "unit") -> float:
    """Time weighting of the DVRF gradient: 1, or ``2 (a + c - a_dot - c_dot)``."""
    if mode == "unit":
        _check_time(t)
        return 1.0
    if mode != "formula":
        raise ConfigError(f"unknown weight mode {mode!r}")
    a, _, a_dot, _ = eval_schedule(s, t)
    c, c_dot = eval_shift(r, t, k, n_total)
    return 2.0 * (a + c - a_dot - c_dot)


def clamp_time(t: float) -> float:
    return min(max(float(t), T_MIN), T_MAX)
