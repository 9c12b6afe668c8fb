"""Euler and DDIM samplers, inversion, reconstruction error and two-ODE translation.

Fields are duck-typed: anything with a ``schedule`` attribute and a
``cfg_velocity(x, t, p, w)`` method works (``cfg_eps`` as well for DDIM).
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigError, DivergenceError, DomainError
from .io import write_csv
from .schedules import T_MAX, T_MIN, ScheduleKind, eval_schedule


class Direction(str, Enum):
    FORWARD = "forward"   # t increasing, data -> noise
    REVERSE = "reverse"   # t decreasing, noise -> data


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing times plus a traversal direction.

    A single-time grid is allowed and means "take no steps".
    """

    times: np.ndarray
    direction: Direction = Direction.REVERSE

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        if times.ndim != 1 or times.size < 1:
            raise ConfigError("time grid needs at least one time")
        if np.any(np.diff(times) <= 0):
            raise ConfigError("grid times must be strictly increasing")
        if times[0] < 0 or times[-1] > 1:
            raise ConfigError("grid times must lie in [0, 1]")
        times.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "direction", Direction(self.direction))

    @classmethod
    def uniform(cls, n_steps: int, t_lo: float = T_MIN, t_hi: float = T_MAX,
                direction: Direction | str = Direction.REVERSE) -> "TimeGrid":
        if n_steps < 0:
            raise ConfigError("n_steps must be >= 0")
        if n_steps == 0:
            times = np.array([t_hi if Direction(direction) is Direction.REVERSE else t_lo])
        else:
            times = np.linspace(t_lo, t_hi, n_steps + 1)
        return cls(times, direction)

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    @property
    def ordered(self) -> np.ndarray:
        """Times in traversal order."""
        return self.times if self.direction is Direction.FORWARD else self.times[::-1]

    def reversed(self) -> "TimeGrid":
        other = Direction.REVERSE if self.direction is Direction.FORWARD else Direction.FORWARD
        return TimeGrid(self.times, other)


@dataclass
class Trajectory:
    times: np.ndarray   # traversal order
    states: np.ndarray  # (n_steps + 1, *latent_shape)

    def __len__(self):
        return self.times.size

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def write_csv(self, path) -> None:
        states = self.states.reshape(len(self), -1)
        header = ["step", "t"] + [f"x{j}" for j in range(states.shape[1])]
        write_csv(path, header, ([i, t, *row] for i, (t, row) in enumerate(zip(self.times, states))))


def _require(grid: TimeGrid, direction: Direction):
    if grid.direction is not direction:
        raise ConfigError(f"expected a {direction.value} grid, got {grid.direction.value}")


def _check_finite(x, step):
    if not np.all(np.isfinite(x)):
        raise DivergenceError("non-finite state", step)


def _euler(f, x, p, grid, cfg_w):
    times = grid.ordered
    states = [np.array(x, dtype=float)]
    x = states[0]
    for i in range(grid.n_steps):
        x = x + (times[i + 1] - times[i]) * f.cfg_velocity(x, times[i], p, cfg_w)
        _check_finite(x, i)
        states.append(x)
    return Trajectory(times.copy(), np.stack(states))


def euler_generate(f, x_start, p, grid: TimeGrid, cfg_w: float = 1.0) -> Trajectory:
    """Euler steps of ``dx = v dt`` from the largest grid time down to the smallest."""
    _require(grid, Direction.REVERSE)
    return _euler(f, x_start, p, grid, cfg_w)


def euler_invert(f, x0, p, grid: TimeGrid, cfg_w: float = 1.0) -> Trajectory:
    """Explicit Euler inversion toward noise.

    Each step uses the velocity at its starting point,
    ``x_{i+1} = x_i + (t_{i+1} - t_i) v(x_i, t_i)``, standing in for the
    unknown ``v(x_{i+1}, t_i)`` that exact inversion would need.
    """
    _require(grid, Direction.FORWARD)
    return _euler(f, x0, p, grid, cfg_w)


def _require_vp(f):
    if f.schedule.kind is not ScheduleKind.VP_DIFFUSION:
        raise ConfigError("DDIM requires a vp_diffusion schedule")


def ddim_step(f, x, t_from: float, t_to: float, p, cfg_w: float = 1.0) -> np.ndarray:
    """Deterministic DDIM update from ``t_from`` to ``t_to`` (either direction)."""
    _require_vp(f)
    x = np.asarray(x, dtype=float)
    if t_from == t_to:
        return x.copy()
    a_from, b_from, _, _ = eval_schedule(f.schedule, t_from)
    a_to, b_to, _, _ = eval_schedule(f.schedule, t_to)
    if a_from == 0:
        raise DomainError(f"a(t)=0 at t={t_from}")
    eps = f.cfg_eps(x, t_from, p, cfg_w)
    return a_to * (x - b_from * eps) / a_from + b_to * eps


def _ddim(f, x, p, grid, cfg_w):
    _require_vp(f)
    times = grid.ordered
    states = [np.array(x, dtype=float)]
    x = states[0]
    for i in range(grid.n_steps):
        x = ddim_step(f, x, times[i], times[i + 1], p, cfg_w)
        _check_finite(x, i)
        states.append(x)
    return Trajectory(times.copy(), np.stack(states))


def ddim_invert(f, x0, p, grid: TimeGrid, cfg_w: float = 1.0) -> Trajectory:
    _require(grid, Direction.FORWARD)
    return _ddim(f, x0, p, grid, cfg_w)


def ddim_generate(f, x_start, p, grid: TimeGrid, cfg_w: float = 1.0) -> Trajectory:
    _require(grid, Direction.REVERSE)
    return _ddim(f, x_start, p, grid, cfg_w)


def reconstruction_error(f, x0, p, grid: TimeGrid, mode: str = "rf_euler",
                         cfg_w: float = 1.0) -> list[tuple[float, float]]:
    """Invert ``x0`` along ``grid`` then reconstruct, returning ``(t, ||x~_t - x_t||)``.

    Errors are reported at every grid time except the terminal one, where
    the two passes meet by construction.  A single-time grid yields
    ``[(t_0, 0.0)]``.
    """
    if grid.direction is not Direction.FORWARD:
        grid = grid.reversed()
    if mode == "rf_euler":
        inv = euler_invert(f, x0, p, grid, cfg_w)
        rec = euler_generate(f, inv.final, p, grid.reversed(), cfg_w)
    elif mode == "ddim":
        inv = ddim_invert(f, x0, p, grid, cfg_w)
        rec = ddim_generate(f, inv.final, p, grid.reversed(), cfg_w)
    else:
        raise ConfigError(f"unknown reconstruction mode {mode!r}")
    if grid.n_steps == 0:
        return [(float(grid.times[0]), 0.0)]
    rec_states = rec.states[::-1]
    out = []
    for i in range(grid.n_steps):
        err = float(np.linalg.norm(rec_states[i] - inv.states[i]))
        out.append((float(grid.times[i]), err))
    return out


def ddib_translate(f, x0_src, p_src, p_tgt, grid: TimeGrid,
                   cfg_pair: tuple[float, float] = (1.0, 1.0)) -> np.ndarray:
    """Invert under the source prompt, then generate under the target prompt."""
    if grid.direction is not Direction.FORWARD:
        grid = grid.reversed()
    w_src, w_tgt = cfg_pair
    noise = euler_invert(f, x0_src, p_src, grid, w_src).final
    return euler_generate(f, noise, p_tgt, grid.reversed(), w_tgt).final
