"""DVRF editing loop, timestep and learning-rate schedules, and the FlowEdit baseline.

Random streams
--------------
Noise for optimisation step ``k`` and batch slot ``i`` comes from
``default_rng([seed, 0, k, i])``; random timesteps from ``default_rng([seed, 1])``.
Both editors use the same streams, so runs with equal seeds see equal noise.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .condfield import CondGMMField
from .distill import DistillContext, dvrf_terms
from .errors import ConfigError, DivergenceError
from .integrate import Direction, TimeGrid
from .io import write_csv
from .schedules import T_MAX, T_MIN, ShiftRule

DIVERGENCE_NORM = 1e6
HUMP_TAIL_KNOTS = ((0.0, 0.3), (0.5, 1.0), (0.9, 1.0), (1.0, 0.5))
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class EditConfig:
    n_steps: int = 50
    batch: int = 1
    scheduler: str = "descending"
    t_lo: float = T_MIN
    t_hi: float = T_MAX
    shift: ShiftRule = field(default_factory=ShiftRule.progressive)
    weight_mode: str = "unit"
    w_src: float = 6.0
    w_tgt: float = 16.5
    optimizer: str = "sgd"
    lr_schedule: str = "constant"
    lr: float = 0.02
    lr_knots: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_steps < 1 or self.batch < 1:
            raise ConfigError("n_steps and batch must be >= 1")
        if not (T_MIN <= self.t_lo < self.t_hi <= T_MAX):
            raise ConfigError(f"t range must satisfy {T_MIN} <= t_lo < t_hi <= {T_MAX}")
        if self.scheduler not in ("descending", "random"):
            raise ConfigError(f"unknown scheduler {self.scheduler!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_schedule not in ("constant", "hump_tail", "euler_matched"):
            raise ConfigError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.weight_mode not in ("unit", "formula"):
            raise ConfigError(f"unknown weight mode {self.weight_mode!r}")
        if self.w_src < 0 or self.w_tgt < 0:
            raise ConfigError("guidance scales must be non-negative")

    def context(self, f: CondGMMField) -> DistillContext:
        return DistillContext(f, self.shift, self.w_src, self.w_tgt, self.weight_mode)

    def lr_params(self) -> dict:
        params = {"value": self.lr, "t_lo": self.t_lo, "t_hi": self.t_hi}
        if self.lr_knots is not None:
            params["knots"] = self.lr_knots
        return params

    def replace(self, **changes) -> "EditConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["shift"] = self.shift.to_dict()
        if self.lr_knots is not None:
            out["lr_knots"] = [list(k) for k in self.lr_knots]
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "EditConfig":
        d = dict(d)
        shift = d.pop("shift", None)
        if isinstance(shift, dict):
            d["shift"] = ShiftRule(shift.get("kind", "progressive"), shift.get("eta", 1.0))
        elif isinstance(shift, str):
            d["shift"] = ShiftRule(shift)
        if d.get("lr_knots") is not None:
            d["lr_knots"] = tuple(tuple(k) for k in d["lr_knots"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown edit config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EditRecord:
    iterates: np.ndarray     # (N + 1, d), iterates[0] is the source
    times: np.ndarray        # (N,)
    grads: np.ndarray        # (N, d)
    grad_norm: np.ndarray    # (N,)
    vdiff_sq: np.ndarray     # (N,) mean over the batch of ||v~(x_hat) - v~(x_src)||^2
    lr: np.ndarray           # (N,)
    n_velocity_evals: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def final(self) -> np.ndarray:
        return self.iterates[-1]

    @property
    def n_steps(self) -> int:
        return self.times.size

    def rows(self):
        for k in range(self.n_steps):
            yield [k, self.times[k], self.lr[k], self.grad_norm[k], self.vdiff_sq[k],
                   *self.iterates[k + 1]]

    def write_csv(self, path) -> None:
        """One row per step; coordinates are the iterate after that step's update."""
        d = self.iterates.shape[1]
        header = ["step", "t", "lr", "grad_norm", "vdiff_sq"] + [f"x{j}" for j in range(d)]
        write_csv(path, header, self.rows())

    def write_final_csv(self, path) -> None:
        d = self.iterates.shape[1]
        write_csv(path, [f"x{j}" for j in range(d)], [self.final])


def timestep_schedule(kind: str, n: int, t_lo: float = T_MIN, t_hi: float = T_MAX,
                      seed: int = 0) -> np.ndarray:
    if n < 1:
        raise ConfigError("number of steps must be >= 1")
    if t_lo >= t_hi:
        raise ConfigError(f"t_lo={t_lo} must be below t_hi={t_hi}")
    if kind == "descending":
        if n == 1:
            return np.array([t_hi])
        return np.linspace(t_hi, t_lo, n)
    if kind == "random":
        return np.random.default_rng([seed, 1]).uniform(t_lo, t_hi, n)
    raise ConfigError(f"unknown timestep scheduler {kind!r}")


def euler_step_sizes(times_desc: Sequence[float]) -> np.ndarray:
    """Step sizes ``t_k - t_{k+1}`` of a descending grid.

    The last step reuses the previous spacing; a single time steps to zero.
    """
    times = np.asarray(times_desc, dtype=float)
    if times.size == 1:
        return times.copy()
    h = times[:-1] - times[1:]
    if np.any(h <= 0):
        raise ConfigError("grid must be strictly descending")
    return np.append(h, h[-1])


def lr_schedule(kind: str, k: int, n: int, params: dict | None = None) -> float:
    params = params or {}
    if not (0 <= k < n):
        raise ConfigError(f"step {k} outside [0, {n})")
    if kind == "constant":
        return float(params.get("value", 0.02))
    if kind == "hump_tail":
        knots = params.get("knots", HUMP_TAIL_KNOTS)
        try:
            xs = np.array([kn[0] for kn in knots], dtype=float)
            ys = np.array([kn[1] for kn in knots], dtype=float)
        except (TypeError, IndexError) as exc:
            raise ConfigError(f"malformed lr knots: {knots!r}") from exc
        if xs.size < 2 or np.any(np.diff(xs) <= 0) or xs[0] > 0 or xs[-1] < 1:
            raise ConfigError("lr knots must be increasing and cover [0, 1]")
        return float(params.get("value", 0.02) * np.interp(k / n, xs, ys))
    if kind == "euler_matched":
        times = params.get("times")
        if times is None:
            times = timestep_schedule("descending", n, params.get("t_lo", T_MIN),
                                      params.get("t_hi", T_MAX))
        return float(euler_step_sizes(times)[k])
    raise ConfigError(f"unknown lr schedule {kind!r}")


def optimizer_step(state: dict | None, x, g, lr: float, kind: str = "sgd"):
    """One optimiser update. Returns ``(x_new, state_new)``; inputs are not mutated."""
    x = np.asarray(x, dtype=float)
    g = np.asarray(g, dtype=float)
    if kind == "sgd":
        return x - lr * g, state
    if kind == "adam":
        b1, b2 = ADAM_BETAS
        if state is None:
            state = {"m": np.zeros_like(x), "v": np.zeros_like(x), "step": 0}
        step = state["step"] + 1
        m = b1 * state["m"] + (1 - b1) * g
        v = b2 * state["v"] + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** step)
        v_hat = v / (1 - b2 ** step)
        return x - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS), {"m": m, "v": v, "step": step}
    raise ConfigError(f"unknown optimizer {kind!r}")


def step_noise(seed: int, k: int, batch: int, dim: int) -> np.ndarray:
    return np.stack([np.random.default_rng([seed, 0, k, i]).standard_normal(dim)
                     for i in range(batch)])


def _check(x, k):
    if not np.all(np.isfinite(x)) or np.linalg.norm(x) > DIVERGENCE_NORM:
        raise DivergenceError("edit iterate diverged", k)


def _as_context(ctx_or_field, cfg: EditConfig) -> DistillContext:
    f = ctx_or_field.field if isinstance(ctx_or_field, DistillContext) else ctx_or_field
    return cfg.context(f)


def dvrf_step_gradient(ctx: DistillContext, x0_tgt, x0_src, p_src, p_tgt, t, eps,
                       k: int, n_total: int):
    """Batch-averaged DVRF gradient and mean squared velocity difference."""
    terms = dvrf_terms(ctx, x0_tgt, x0_src, p_tgt, p_src, t, eps, k, n_total)
    g = terms.weight * terms.residual.mean(axis=0)
    dv = terms.v_tgt - terms.v_src
    return g, float(np.mean(np.sum(dv * dv, axis=1)))


def edit_dvrf(ctx, cfg: EditConfig, x0_src, p_src: int, p_tgt: int) -> EditRecord:
    """Run the DVRF editing loop starting from ``x0_tgt = x0_src``.

    ``ctx`` may be a field or a :class:`DistillContext`; shift, guidance
    scales and weight mode are always taken from ``cfg``.
    """
    ctx = _as_context(ctx, cfg)
    x0_src = np.asarray(x0_src, dtype=float)
    n, d = cfg.n_steps, x0_src.shape[0]
    times = timestep_schedule(cfg.scheduler, n, cfg.t_lo, cfg.t_hi, cfg.seed)
    params = cfg.lr_params()
    if cfg.lr_schedule == "euler_matched":
        params["times"] = times

    x = x0_src.copy()
    iterates = [x]
    grads, vdiff, lrs = [], [], []
    state = None
    for k in range(n):
        eps = step_noise(cfg.seed, k, cfg.batch, d)
        g, vd = dvrf_step_gradient(ctx, x, x0_src, p_src, p_tgt, times[k], eps, k, n)
        lr = lr_schedule(cfg.lr_schedule, k, n, params)
        x, state = optimizer_step(state, x, g, lr, cfg.optimizer)
        _check(x, k)
        iterates.append(x)
        grads.append(g)
        vdiff.append(vd)
        lrs.append(lr)
    grads = np.array(grads)
    return EditRecord(np.array(iterates), times, grads, np.linalg.norm(grads, axis=1),
                      np.array(vdiff), np.array(lrs), 2 * cfg.batch * n,
                      {"method": "dvrf", "p_src": p_src, "p_tgt": p_tgt})


def flowedit_baseline(ctx, x0_src, p_src: int, p_tgt: int, grid: TimeGrid | Sequence[float],
                      batch: int = 1, seed: int = 0) -> EditRecord:
    """Euler integration of the FlowEdit ODE over a descending grid.

    At each grid time the target branch is evaluated at
    ``x_t^src + (x0_tgt - x0_src)`` and the velocity difference is averaged
    over ``batch`` noises.  Step sizes follow :func:`euler_step_sizes`.
    """
    if not isinstance(ctx, DistillContext):
        ctx = DistillContext(ctx)
    if isinstance(grid, TimeGrid):
        if grid.direction is not Direction.REVERSE:
            raise ConfigError("FlowEdit needs a reverse (descending) grid")
        times = grid.ordered
    else:
        times = np.asarray(grid, dtype=float)
    h = euler_step_sizes(times)
    f = ctx.field
    x0_src = np.asarray(x0_src, dtype=float)
    d = x0_src.shape[0]
    x = x0_src.copy()
    iterates = [x]
    grads, vdiff = [], []
    for k, t in enumerate(times):
        a, b, _, _ = ctx.coefficients(t)
        eps = step_noise(seed, k, batch, d)
        x_src = a * x0_src + b * eps
        dv = (f.cfg_velocity(x_src + (x - x0_src), t, p_tgt, ctx.w_tgt)
              - f.cfg_velocity(x_src, t, p_src, ctx.w_src))
        g = dv.mean(axis=0)
        x = x - h[k] * g
        _check(x, k)
        iterates.append(x)
        grads.append(g)
        vdiff.append(float(np.mean(np.sum(dv * dv, axis=1))))
    grads = np.array(grads)
    return EditRecord(np.array(iterates), np.array(times), grads, np.linalg.norm(grads, axis=1),
                      np.array(vdiff), h, 2 * batch * len(times),
                      {"method": "flowedit", "p_src": p_src, "p_tgt": p_tgt})


def flowedit_matched_config(n_steps: int = 50, batch: int = 1, seed: int = 0,
                            w_src: float = 6.0, w_tgt: float = 16.5,
                            t_lo: float = T_MIN, t_hi: float = T_MAX) -> EditConfig:
    """The DVRF configuration that reproduces FlowEdit: ``c_t = t``, unit weight, SGD, lr = dt."""
    return EditConfig(n_steps=n_steps, batch=batch, scheduler="descending", t_lo=t_lo, t_hi=t_hi,
                      shift=ShiftRule.linear(1.0), weight_mode="unit", w_src=w_src, w_tgt=w_tgt,
                      optimizer="sgd", lr_schedule="euler_matched", seed=seed)
