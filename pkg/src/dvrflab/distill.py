"""Distillation energies and their Jacobian-free gradients (SDS, RFDS, DDS, DVRF).

All functions take a single time ``t`` and noise ``eps``.  ``eps`` may be a
batch ``(B, d)``; the returned residuals are then per-sample.  Source and
target branches always share ``eps``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .condfield import CondGMMField, eps_view
from .errors import ConfigError, DivergenceError, ShapeError
from .schedules import (T_MAX, T_MIN, Schedule, ShiftRule, eval_schedule, eval_shift,
                        weight_dvrf)


@dataclass(frozen=True)
class DistillContext:
    field: CondGMMField
    shift: ShiftRule = field(default_factory=ShiftRule.zero)
    w_src: float = 6.0
    w_tgt: float = 16.5
    weight_mode: str = "unit"

    def __post_init__(self):
        if self.w_src < 0 or self.w_tgt < 0:
            raise ConfigError("guidance scales must be non-negative")
        if self.weight_mode not in ("unit", "formula"):
            raise ConfigError(f"unknown weight mode {self.weight_mode!r}")

    @property
    def schedule(self) -> Schedule:
        return self.field.schedule

    def coefficients(self, t):
        return self.field.coefficients(t)


def _pair(x0, eps):
    x0 = np.asarray(x0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if eps.shape[-1] != x0.shape[-1]:
        raise ShapeError(f"noise shape {eps.shape} does not match latent shape {x0.shape}")
    return x0, eps


def grad_rfds(ctx: DistillContext, x0, p, t, eps, cfg_w: float | None = None) -> np.ndarray:
    """RFDS residual ``v~(x_t) - (a_dot x0 + b_dot eps)`` with unit weight.

    ``cfg_w`` defaults to the context's target scale.
    """
    x0, eps = _pair(x0, eps)
    a, b, a_dot, b_dot = ctx.coefficients(t)
    w = ctx.w_tgt if cfg_w is None else cfg_w
    xt = a * x0 + b * eps
    return ctx.field.cfg_velocity(xt, t, p, w) - (a_dot * x0 + b_dot * eps)


def grad_sds(ctx: DistillContext, x0, p, t, eps, cfg_w: float | None = None) -> np.ndarray:
    """SDS residual ``eps_theta(x_t) - eps`` through the noise view of the velocity."""
    x0, eps = _pair(x0, eps)
    a, b, _, _ = ctx.coefficients(t)
    w = ctx.w_tgt if cfg_w is None else cfg_w
    xt = a * x0 + b * eps
    return eps_view(ctx.field.cfg_velocity(xt, t, p, w), xt, t, ctx.schedule) - eps


def grad_dds(ctx: DistillContext, x0_tgt, x0_src, p_tgt, p_src, t, eps) -> np.ndarray:
    """DDS residual: difference of noise predictions on the two branches."""
    x0_tgt, eps = _pair(x0_tgt, eps)
    x0_src = np.asarray(x0_src, dtype=float)
    a, b, _, _ = ctx.coefficients(t)
    xt_tgt = a * x0_tgt + b * eps
    xt_src = a * x0_src + b * eps
    f = ctx.field
    return f.cfg_eps(xt_tgt, t, p_tgt, ctx.w_tgt) - f.cfg_eps(xt_src, t, p_src, ctx.w_src)


class DVRFTerms(NamedTuple):
    residual: np.ndarray   # v~(x_hat) - v~(x_src) - (a_dot + c_dot)(x0_tgt - x0_src)
    v_tgt: np.ndarray
    v_src: np.ndarray
    x_hat: np.ndarray
    x_src: np.ndarray
    weight: float
    a: float
    c: float
    a_dot: float
    c_dot: float


def dvrf_terms(ctx: DistillContext, x0_tgt, x0_src, p_tgt, p_src, t, eps,
               k: int = 0, n_total: int = 1) -> DVRFTerms:
    x0_tgt, eps = _pair(x0_tgt, eps)
    x0_src = np.asarray(x0_src, dtype=float)
    a, b, a_dot, _ = ctx.coefficients(t)
    c, c_dot = eval_shift(ctx.shift, t, k, n_total)
    delta = x0_tgt - x0_src
    x_src = a * x0_src + b * eps
    x_hat = a * x0_tgt + b * eps + c * delta
    f = ctx.field
    v_tgt = f.cfg_velocity(x_hat, t, p_tgt, ctx.w_tgt)
    v_src = f.cfg_velocity(x_src, t, p_src, ctx.w_src)
    residual = v_tgt - v_src - (a_dot + c_dot) * delta
    weight = weight_dvrf(ctx.schedule, ctx.shift, t, k, n_total, ctx.weight_mode)
    return DVRFTerms(residual, v_tgt, v_src, x_hat, x_src, weight, a, c, a_dot, c_dot)


def grad_dvrf(ctx: DistillContext, x0_tgt, x0_src, p_tgt, p_src, t, eps,
              k: int = 0, n_total: int = 1) -> np.ndarray:
    """Approximate DVRF gradient with the network Jacobian replaced by the identity.

    With ``c = 0`` this equals ``(b_dot a - a_dot b) / a`` times the DDS residual.
    """
    terms = dvrf_terms(ctx, x0_tgt, x0_src, p_tgt, p_src, t, eps, k, n_total)
    return terms.weight * terms.residual


def energy_dvrf(ctx: DistillContext, x0_tgt, x0_src, p_tgt, p_src, t, eps,
                k: int = 0, n_total: int = 1) -> float:
    """Single-sample DVRF energy ``||residual||^2``."""
    r = dvrf_terms(ctx, x0_tgt, x0_src, p_tgt, p_src, t, eps, k, n_total).residual
    return float(np.sum(r * r))


def energy_dvrf_grad(ctx: DistillContext, x0_tgt, x0_src, p_tgt, p_src, t, eps,
                     k: int = 0, n_total: int = 1) -> np.ndarray:
    """Exact gradient of :func:`energy_dvrf` in ``x0_tgt``, field Jacobian included."""
    terms = dvrf_terms(ctx, x0_tgt, x0_src, p_tgt, p_src, t, eps, k, n_total)
    if terms.x_hat.ndim != 1:
        raise ShapeError("full gradient is defined for a single noise sample")
    jac = ctx.field.cfg_velocity_jacobian(terms.x_hat, t, p_tgt, ctx.w_tgt)
    d = jac.shape[0]
    dres = (terms.a + terms.c) * jac - (terms.a_dot + terms.c_dot) * np.eye(d)
    return 2.0 * dres.T @ terms.residual


def irfds_invert(ctx: DistillContext, x0, p, iters: int, step_size: float, seed: int = 0,
                 t: float | None = None, t_range: tuple[float, float] = (T_MIN, T_MAX),
                 eps_init=None) -> np.ndarray:
    """Optimise the noise ``eps`` against the RFDS energy of ``x0``.

    The network Jacobian is dropped, so ``d residual / d eps ~ -b_dot I`` and
    the update is ``eps <- eps + step * b_dot * residual``.  ``t`` is redrawn
    uniformly from ``t_range`` every iteration unless fixed.
    """
    if iters < 1:
        raise ConfigError("iters must be >= 1")
    x0 = np.asarray(x0, dtype=float)
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal(x0.shape) if eps_init is None else np.array(eps_init, dtype=float)
    for i in range(iters):
        ti = rng.uniform(*t_range) if t is None else t
        _, _, _, b_dot = eval_schedule(ctx.schedule, ti)
        eps = eps + step_size * b_dot * grad_rfds(ctx, x0, p, ti, eps)
        if not np.all(np.isfinite(eps)):
            raise DivergenceError("noise inversion diverged", i)
    return eps
