"""Trajectory geometry, sweeps and ablations, equivalence reports and finite-difference oracles."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .condfield import CondGMMField, Mixture, eps_view
from .distill import DistillContext, grad_dds, grad_dvrf
from .editor import EditConfig, EditRecord, edit_dvrf, flowedit_baseline, flowedit_matched_config
from .errors import ConfigError, DegeneratePathError, DomainError
from .io import write_csv
from .schedules import T_MAX, T_MIN, Schedule, ShiftRule, eval_schedule

CHORD_MIN = 1e-12
SOURCE_STREAM = 99


@dataclass(frozen=True)
class StraightnessReport:
    S_R: float
    path_length: float
    chord_length: float
    step_lengths: np.ndarray


def path_to_chord(traj) -> StraightnessReport:
    """Path length over endpoint distance of an iterate sequence (or an :class:`EditRecord`)."""
    pts = traj.iterates if isinstance(traj, EditRecord) else np.asarray(traj, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.shape[0] < 2:
        raise DegeneratePathError("a path needs at least two points")
    steps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    chord = float(np.linalg.norm(pts[-1] - pts[0]))
    if chord < CHORD_MIN:
        raise DegeneratePathError(f"chord length {chord:.3g} is below {CHORD_MIN}")
    path = float(steps.sum())
    return StraightnessReport(path / chord, path, chord, steps)


def update_energy(record: EditRecord) -> float:
    """Sum over steps of the batch-mean squared guided velocity difference."""
    return float(np.sum(record.vdiff_sq))


@dataclass(frozen=True)
class TranslationTask:
    """Source and target prompts whose ideal edit is ``x -> x + shift``."""

    field: CondGMMField
    shift: np.ndarray
    p_src: int = 0
    p_tgt: int = 1

    def source(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng([seed, SOURCE_STREAM])
        return self.field.mixture(self.p_src).sample(rng, 1)[0]

    def ideal(self, x0_src) -> np.ndarray:
        return np.asarray(x0_src, dtype=float) + self.shift


def gaussian_translation_task(mu=(4.0, 1.0), variance=(1.0, 0.1),
                              schedule: Schedule | None = None) -> TranslationTask:
    """Source ``N(0, diag var)`` and target ``N(mu, diag var)``.

    A shared anisotropic covariance keeps the ideal edit a pure translation
    while letting editing paths bend; with isotropic variance every velocity
    difference is parallel to ``mu`` and all paths are straight.
    """
    mu = np.asarray(mu, dtype=float)
    f = CondGMMField([Mixture.gaussian(np.zeros_like(mu), variance),
                      Mixture.gaussian(mu, variance)], schedule)
    return TranslationTask(f, mu)


def translation_edit_config(**overrides) -> EditConfig:
    """Editing defaults for analytic translation tasks: exact conditionals, so unit guidance."""
    base = EditConfig(w_src=1.0, w_tgt=1.0, lr_schedule="constant", lr=0.02)
    return base.replace(**overrides)


@dataclass(frozen=True)
class RunSummary:
    label: str
    seed: int
    S_R: float
    update_energy: float
    dist_src: float
    dist_ideal: float


def run_task(task: TranslationTask, cfg: EditConfig, seed: int, label: str = "") -> RunSummary:
    xs = task.source(seed)
    rec = edit_dvrf(task.field, cfg.replace(seed=seed), xs, task.p_src, task.p_tgt)
    return RunSummary(label, seed, path_to_chord(rec).S_R, update_energy(rec),
                      float(np.linalg.norm(rec.final - xs)),
                      float(np.linalg.norm(rec.final - task.ideal(xs))))


def _run_cells(task, cells, workers):
    fn = lambda cell: run_task(task, cell[1], cell[2], cell[0])  # noqa: E731
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            return list(ex.map(fn, cells))
    return [fn(c) for c in cells]


@dataclass
class SweepTable:
    rows: list[RunSummary]
    key: str

    def labels(self) -> list:
        seen = []
        for r in self.rows:
            if r.label not in seen:
                seen.append(r.label)
        return seen

    def mean(self, label, column: str) -> float:
        vals = [getattr(r, column) for r in self.rows if r.label == label]
        return float(np.mean(vals))

    def means(self, column: str) -> list[float]:
        return [self.mean(lb, column) for lb in self.labels()]

    def summary(self) -> list[tuple]:
        return [(lb, self.mean(lb, "S_R"), self.mean(lb, "update_energy")) for lb in self.labels()]

    def write_csv(self, path) -> None:
        if self.key == "eta":
            write_csv(path, ["eta", "seed", "S_R", "update_energy"],
                      ([r.label, r.seed, r.S_R, r.update_energy] for r in self.rows))
        else:
            write_csv(path, [self.key, "seed", "S_R", "update_energy", "dist_src", "dist_ideal"],
                      ([r.label, r.seed, r.S_R, r.update_energy, r.dist_src, r.dist_ideal]
                       for r in self.rows))

    def write_summary_csv(self, path) -> None:
        cols = ["S_R", "update_energy", "dist_src", "dist_ideal"]
        write_csv(path, [self.key] + cols,
                  ([lb] + [self.mean(lb, c) for c in cols] for lb in self.labels()))


def eta_sweep(task: TranslationTask, etas: Sequence[float], seeds: Iterable[int],
              base: EditConfig | None = None, workers: int = 1) -> SweepTable:
    """Run ``edit_dvrf`` with ``c_t = eta t`` for every ``(eta, seed)`` cell."""
    etas = [float(e) for e in etas]
    if not etas:
        raise ConfigError("eta_sweep needs at least one eta")
    base = base or translation_edit_config()
    cells = [(eta, base.replace(shift=ShiftRule.linear(eta)), s) for eta in etas for s in seeds]
    return SweepTable(_run_cells(task, cells, workers), "eta")


def ablation(task: TranslationTask, variants: dict[str, EditConfig], seeds: Iterable[int],
             key: str = "variant", workers: int = 1) -> SweepTable:
    """Run every named configuration on every seed of ``task``."""
    if not variants:
        raise ConfigError("ablation needs at least one variant")
    seeds = list(seeds)
    cells = [(name, cfg, s) for name, cfg in variants.items() for s in seeds]
    return SweepTable(_run_cells(task, cells, workers), key)


def shift_variants(base: EditConfig) -> dict[str, EditConfig]:
    return {"zero": base.replace(shift=ShiftRule.zero()),
            "progressive": base.replace(shift=ShiftRule.progressive()),
            "linear_eta": base.replace(shift=ShiftRule.linear(1.0))}


def scheduler_variants(base: EditConfig) -> dict[str, EditConfig]:
    return {kind: base.replace(scheduler=kind) for kind in ("descending", "random")}


def optimizer_variants(base: EditConfig) -> dict[str, EditConfig]:
    return {kind: base.replace(optimizer=kind) for kind in ("sgd", "adam")}


def finite_diff_grad(fn: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    if not h > 0:
        raise DomainError("step h must be positive")
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        fp, fm = float(fn(xp)), float(fn(xm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise DomainError(f"non-finite function value at coordinate {idx}")
        g[idx] = (fp - fm) / (2 * h)
    return g


def _rel(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.max(np.abs(b)), np.finfo(float).tiny)
    return float(np.max(np.abs(a - b)) / scale)


def dds_dvrf_deviation(ctx: DistillContext, n_probes: int = 50, seed: int = 0,
                       p_tgt: int = 1, p_src: int = 0) -> float:
    """Max relative deviation of ``grad_dvrf`` from ``(b_dot a - a_dot b)/a`` times ``grad_dds``.

    The identity needs ``c = 0`` and unit weight; other contexts act as
    negative controls.
    """
    rng = np.random.default_rng([seed, 7])
    d = ctx.field.dim
    worst = 0.0
    for _ in range(n_probes):
        t = rng.uniform(T_MIN, T_MAX)
        x_tgt, x_src, eps = rng.standard_normal((3, d)) * 2.0
        a, b, a_dot, b_dot = eval_schedule(ctx.schedule, t)
        lhs = grad_dvrf(ctx, x_tgt, x_src, p_tgt, p_src, t, eps)
        rhs = (b_dot * a - a_dot * b) / a * grad_dds(ctx, x_tgt, x_src, p_tgt, p_src, t, eps)
        worst = max(worst, _rel(lhs, rhs))
    return worst


def eps_roundtrip_deviation(f: CondGMMField, n_probes: int = 50, seed: int = 0) -> float:
    """Max relative deviation of ``velocity -> eps -> velocity`` and of eps against the posterior."""
    from .condfield import velocity_view
    rng = np.random.default_rng([seed, 8])
    worst = 0.0
    for _ in range(n_probes):
        t = rng.uniform(T_MIN, T_MAX)
        p = int(rng.integers(f.n_prompts))
        x = rng.standard_normal(f.dim) * 2.0
        v = f.velocity(x, t, p)
        eps = eps_view(v, x, t, f.schedule)
        worst = max(worst, _rel(velocity_view(eps, x, t, f.schedule), v),
                    _rel(eps, f.posterior_eps(x, t, p)))
    return worst


def flowedit_dvrf_deviation(ctx: DistillContext, x0_src, p_src: int, p_tgt: int,
                            n_steps: int = 50, batch: int = 1, seed: int = 0,
                            lr_scale: float = 1.0) -> float:
    """Max per-step relative deviation between matched DVRF and the FlowEdit ODE.

    ``lr_scale != 1`` perturbs the DVRF learning rate (negative control).
    """
    cfg = flowedit_matched_config(n_steps, batch, seed, ctx.w_src, ctx.w_tgt)
    if lr_scale != 1.0:
        cfg = cfg.replace(lr_schedule="constant",
                          lr=lr_scale * (cfg.t_hi - cfg.t_lo) / (n_steps - 1))
    dvrf = edit_dvrf(ctx.field, cfg, x0_src, p_src, p_tgt)
    times = np.linspace(cfg.t_hi, cfg.t_lo, n_steps)
    fe = flowedit_baseline(ctx, x0_src, p_src, p_tgt, times, batch, seed)
    scale = max(float(np.max(np.abs(fe.iterates))), 1.0)
    return float(np.max(np.abs(dvrf.iterates - fe.iterates)) / scale)


def equivalence_report(kind: str, ctx: DistillContext, **kwargs) -> float:
    """Dispatch to the ``dds_dvrf`` or ``flowedit_dvrf`` deviation check."""
    if kind == "dds_dvrf":
        return dds_dvrf_deviation(ctx, **kwargs)
    if kind == "flowedit_dvrf":
        return flowedit_dvrf_deviation(ctx, **kwargs)
    raise ConfigError(f"unknown equivalence kind {kind!r}")
