"""Experiment runner: ``dvrflab run <config.json>``.

Config schema (JSON)::

    {
      "scenario": "edit",            # one of SCENARIOS
      "seed": 0,                     # required unless --seed is given
      "task": {"mu": [4, 1], "variance": [1, 0.1]},   # or "field": {...}
      "field": {"schedule": "rectified_flow",
                "prompts": [{"components": [[w, mean, var], ...]}, ...]},
      "edit": {...},                 # EditConfig overrides
      "params": {...}                # scenario parameters, see PARAM_DEFAULTS
    }

Exit codes: 0 ok, 2 invalid config, 3 numerical divergence, 4 I/O failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .analytics import (TranslationTask, ablation, dds_dvrf_deviation, eps_roundtrip_deviation,
                        eta_sweep, flowedit_dvrf_deviation, gaussian_translation_task,
                        optimizer_variants, scheduler_variants, shift_variants,
                        translation_edit_config)
from .condfield import CondGMMField
from .distill import DistillContext
from .editor import EditConfig, edit_dvrf, flowedit_baseline
from .errors import ConfigError, DivergenceError
from .integrate import TimeGrid, ddib_translate, reconstruction_error
from .io import read_csv, write_csv
from .schedules import Schedule

OUT_ENV = "DVRFLAB_OUT"
TOP_KEYS = {"scenario", "seed", "field", "task", "edit", "params", "description"}

PARAM_DEFAULTS = {
    "edit": {"p_src": 0, "p_tgt": 1, "source": None},
    "flowedit": {"p_src": 0, "p_tgt": 1, "source": None, "n_steps": 50, "batch": 1},
    "ddib": {"p_src": 0, "p_tgt": 1, "n_steps": 400, "n_inputs": 5, "cfg_pair": [1.0, 1.0]},
    "recon_error": {"p": 0, "n_steps": [50, 250], "modes": ["rf_euler", "ddim"], "n_inputs": 5},
    "eta_sweep": {"etas": [0.0, 0.5, 1.0], "n_seeds": 10},
    "equivalence": {"n_probes": 50, "n_seeds": 5, "n_steps": 50, "lr_scale_control": 1.05},
    "scheduler_ablation": {"n_seeds": 10},
    "shift_ablation": {"n_seeds": 10},
    "optimizer_ablation": {"n_seeds": 10},
}
SCENARIOS = tuple(PARAM_DEFAULTS)


# ---------------------------------------------------------------- SVG

def _num(s: str, col: str) -> float:
    try:
        return float(s)
    except ValueError as exc:
        raise ConfigError(f"column {col!r} holds non-numeric value {s!r}") from exc


def _f(v: float) -> str:
    return f"{v:.2f}"


def emit_svg(csv_path, x_col: str, y_col: str, group_col: str | None = None,
             out_path=None, title: str | None = None) -> Path:
    """Plain-text SVG line plot of ``y_col`` against ``x_col``, one polyline per group."""
    header, rows = read_csv(csv_path)
    for col in (x_col, y_col) + ((group_col,) if group_col else ()):
        if col not in header:
            raise ConfigError(f"column {col!r} not in {csv_path}")
    if not rows:
        raise ConfigError(f"{csv_path} has no data rows")
    ix, iy = header.index(x_col), header.index(y_col)
    groups: dict[str, list[tuple[float, float]]] = {}
    for row in rows:
        key = row[header.index(group_col)] if group_col else ""
        groups.setdefault(key, []).append((_num(row[ix], x_col), _num(row[iy], y_col)))

    xs = [p[0] for pts in groups.values() for p in pts]
    ys = [p[1] for pts in groups.values() for p in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = y1 if y1 > y0 else y0 + 1.0
    w, h, m = 480.0, 320.0, 50.0
    sx = lambda x: m + (x - x0) / (x1 - x0) * (w - 2 * m)  # noqa: E731
    sy = lambda y: h - m - (y - y0) / (y1 - y0) * (h - 2 * m)  # noqa: E731

    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{int(w)}" height="{int(h)}" '
           f'viewBox="0 0 {int(w)} {int(h)}">',
           '<rect width="100%" height="100%" fill="white"/>',
           f'<line x1="{_f(m)}" y1="{_f(h - m)}" x2="{_f(w - m)}" y2="{_f(h - m)}" stroke="black"/>',
           f'<line x1="{_f(m)}" y1="{_f(m)}" x2="{_f(m)}" y2="{_f(h - m)}" stroke="black"/>',
           f'<text x="{_f(w / 2)}" y="{_f(h - 12)}" text-anchor="middle" font-size="12">{x_col}</text>',
           f'<text x="14" y="{_f(h / 2)}" text-anchor="middle" font-size="12" '
           f'transform="rotate(-90 14 {_f(h / 2)})">{y_col}</text>',
           f'<text x="{_f(m)}" y="{_f(h - m + 14)}" font-size="10">{x0:.4g}</text>',
           f'<text x="{_f(w - m)}" y="{_f(h - m + 14)}" font-size="10" text-anchor="end">{x1:.4g}</text>',
           f'<text x="{_f(m - 4)}" y="{_f(h - m)}" font-size="10" text-anchor="end">{y0:.4g}</text>',
           f'<text x="{_f(m - 4)}" y="{_f(m + 4)}" font-size="10" text-anchor="end">{y1:.4g}</text>']
    if title:
        out.append(f'<text x="{_f(w / 2)}" y="20" text-anchor="middle" font-size="14">{title}</text>')
    for i, (key, pts) in enumerate(groups.items()):
        color = palette[i % len(palette)]
        coords = " ".join(f"{_f(sx(x))},{_f(sy(y))}" for x, y in pts)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        if group_col:
            out.append(f'<text x="{_f(w - m + 4)}" y="{_f(m + 14 * i)}" font-size="10" '
                       f'fill="{color}">{group_col}={key}</text>')
    out.append("</svg>")
    out_path = Path(out_path) if out_path else Path(csv_path).with_suffix(".svg")
    out_path.write_text("\n".join(out) + "\n")
    return out_path


# ---------------------------------------------------------------- config

def _section(cfg: dict, name: str) -> dict:
    val = cfg.get(name, {})
    if not isinstance(val, dict):
        raise ConfigError(f"{name}: expected an object")
    return val


def resolve_config(raw: dict, seed_override: int | None = None) -> dict:
    """Validate a raw config and fill scenario defaults."""
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be an object")
    unknown = set(raw) - TOP_KEYS
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown config field")
    scenario = raw.get("scenario")
    if scenario not in SCENARIOS:
        raise ConfigError(f"scenario: {scenario!r} is not one of {', '.join(SCENARIOS)}")
    seed = raw.get("seed") if seed_override is None else seed_override
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed: required non-negative integer, got {seed!r}")
    params = _section(raw, "params")
    bad = set(params) - set(PARAM_DEFAULTS[scenario])
    if bad:
        raise ConfigError(f"params.{sorted(bad)[0]}: not a parameter of scenario {scenario!r}")
    if "field" in raw and "task" in raw:
        raise ConfigError("field: give either 'field' or 'task', not both")
    out = {"scenario": scenario, "seed": seed,
           "params": {**PARAM_DEFAULTS[scenario], **params},
           "edit": dict(_section(raw, "edit"))}
    if "field" in raw:
        out["field"] = _section(raw, "field")
    else:
        task = _section(raw, "task")
        extra = set(task) - {"mu", "variance", "schedule"}
        if extra:
            raise ConfigError(f"task.{sorted(extra)[0]}: unknown task field")
        out["task"] = {"mu": [4.0, 1.0], "variance": [1.0, 0.1],
                       "schedule": "rectified_flow", **task}
    if "description" in raw:
        out["description"] = raw["description"]
    return out


def _field_and_task(cfg: dict) -> tuple[CondGMMField, TranslationTask | None]:
    if "field" in cfg:
        f = CondGMMField.from_config(cfg["field"])
        if f.n_prompts < 2:
            return f, None
        means = [m.weights @ m.means for m in f.mixtures]
        return f, TranslationTask(f, means[1] - means[0])
    t = cfg["task"]
    try:
        schedule = Schedule(t["schedule"])
    except ValueError as exc:
        raise ConfigError(f"task.schedule: unknown schedule {t['schedule']!r}") from exc
    try:
        task = gaussian_translation_task(t["mu"], t["variance"], schedule)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"task: {exc}") from exc
    return task.field, task


def _edit_config(cfg: dict, translation: bool) -> EditConfig:
    try:
        base = translation_edit_config() if translation else EditConfig()
        merged = {**base.to_dict(), **cfg["edit"], "seed": cfg["seed"]}
        return EditConfig.from_dict(merged)
    except ConfigError as exc:
        raise ConfigError(f"edit: {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"edit: {exc}") from exc


def _source(f: CondGMMField, task, params: dict, seed: int) -> np.ndarray:
    if params.get("source") is not None:
        src = np.asarray(params["source"], dtype=float)
        if src.shape != (f.dim,):
            raise ConfigError(f"params.source: expected {f.dim} coordinates")
        return src
    if task is not None and task.p_src == params["p_src"]:
        return task.source(seed)
    return f.mixture(params["p_src"]).sample(np.random.default_rng([seed, 99]), 1)[0]


def _seeds(cfg: dict) -> list[int]:
    n = cfg["params"]["n_seeds"]
    if not isinstance(n, int) or n < 1:
        raise ConfigError("params.n_seeds: expected a positive integer")
    return [cfg["seed"] + i for i in range(n)]


def _need_task(task):
    if task is None:
        raise ConfigError("field: scenario needs at least two prompts")
    return task


# ---------------------------------------------------------------- scenarios

def _run_edit(cfg, out: Path, threads: int):
    f, task = _field_and_task(cfg)
    p = cfg["params"]
    ecfg = _edit_config(cfg, "task" in cfg)
    rec = edit_dvrf(f, ecfg, _source(f, task, p, cfg["seed"]), p["p_src"], p["p_tgt"])
    rec.write_csv(out / "edit.csv")
    rec.write_final_csv(out / "final.csv")
    emit_svg(out / "edit.csv", "step", "grad_norm", out_path=out / "edit_grad_norm.svg")
    emit_svg(out / "edit.csv", "step", "lr", out_path=out / "edit_lr.svg")
    return ecfg


def _run_flowedit(cfg, out: Path, threads: int):
    f, task = _field_and_task(cfg)
    p = cfg["params"]
    ecfg = _edit_config(cfg, "task" in cfg)
    grid = TimeGrid.uniform(p["n_steps"] - 1, ecfg.t_lo, ecfg.t_hi)
    rec = flowedit_baseline(ecfg.context(f), _source(f, task, p, cfg["seed"]), p["p_src"],
                            p["p_tgt"], grid, p["batch"], cfg["seed"])
    rec.write_csv(out / "flowedit.csv")
    rec.write_final_csv(out / "final.csv")
    emit_svg(out / "flowedit.csv", "step", "grad_norm")
    return ecfg


def _run_ddib(cfg, out: Path, threads: int):
    f, _ = _field_and_task(cfg)
    p = cfg["params"]
    grid = TimeGrid.uniform(p["n_steps"], direction="forward")
    rng = np.random.default_rng([cfg["seed"], 99])
    xs = f.mixture(p["p_src"]).sample(rng, p["n_inputs"])
    d = f.dim
    rows = []
    for i, x in enumerate(xs):
        y = ddib_translate(f, x, p["p_src"], p["p_tgt"], grid, tuple(p["cfg_pair"]))
        rows.append([i, *x, *y, float(np.linalg.norm(y - x))])
    write_csv(out / "ddib.csv", ["index"] + [f"src{j}" for j in range(d)]
              + [f"out{j}" for j in range(d)] + ["distance"], rows)


def _run_recon(cfg, out: Path, threads: int):
    f, _ = _field_and_task(cfg)
    p = cfg["params"]
    rng = np.random.default_rng([cfg["seed"], 99])
    xs = f.mixture(p["p"]).sample(rng, p["n_inputs"])
    rows = []
    for mode in p["modes"]:
        fm = f.with_schedule(Schedule.vp_diffusion() if mode == "ddim" else Schedule.rectified_flow())
        for n in p["n_steps"]:
            grid = TimeGrid.uniform(n, direction="forward")
            errs = np.mean([[e for _, e in reconstruction_error(fm, x, p["p"], grid, mode)]
                            for x in xs], axis=0)
            for t, e in zip(grid.times[:-1] if n else grid.times, errs):
                rows.append([f"{mode}_N{n}", mode, n, t, e])
    write_csv(out / "recon_error.csv", ["curve", "mode", "n_steps", "t", "error"], rows)
    emit_svg(out / "recon_error.csv", "t", "error", "curve")


def _run_eta_sweep(cfg, out: Path, threads: int):
    f, task = _field_and_task(cfg)
    ecfg = _edit_config(cfg, "task" in cfg)
    table = eta_sweep(_need_task(task), cfg["params"]["etas"], _seeds(cfg), ecfg, threads)
    table.write_csv(out / "etasweep.csv")
    table.write_summary_csv(out / "etasweep_summary.csv")
    emit_svg(out / "etasweep_summary.csv", "eta", "S_R", out_path=out / "etasweep_S_R.svg")
    emit_svg(out / "etasweep_summary.csv", "eta", "update_energy",
             out_path=out / "etasweep_update_energy.svg")
    return ecfg


def _ablation_runner(variants_fn, key):
    def run(cfg, out: Path, threads: int):
        f, task = _field_and_task(cfg)
        ecfg = _edit_config(cfg, "task" in cfg)
        table = ablation(_need_task(task), variants_fn(ecfg), _seeds(cfg), key, threads)
        table.write_csv(out / f"{key}_ablation.csv")
        table.write_summary_csv(out / f"{key}_ablation_summary.csv")
        return ecfg
    return run


def _run_equivalence(cfg, out: Path, threads: int):
    f, task = _field_and_task(cfg)
    p = cfg["params"]
    ecfg = _edit_config(cfg, "task" in cfg)
    ctx = DistillContext(f, w_src=ecfg.w_src, w_tgt=ecfg.w_tgt)
    rows = []
    for s in _seeds(cfg):
        rows.append(["eps_roundtrip", s, eps_roundtrip_deviation(f, p["n_probes"], s), ""])
        control = DistillContext(f, shift_variants(ecfg)["linear_eta"].shift, ecfg.w_src, ecfg.w_tgt)
        rows.append(["dds_dvrf", s, dds_dvrf_deviation(ctx, p["n_probes"], s),
                     dds_dvrf_deviation(control, p["n_probes"], s)])
        xs = _source(f, task, {"p_src": 0, "source": None}, s)
        rows.append(["flowedit_dvrf", s,
                     flowedit_dvrf_deviation(ctx, xs, 0, 1, p["n_steps"], 1, s),
                     flowedit_dvrf_deviation(ctx, xs, 0, 1, p["n_steps"], 1, s,
                                             p["lr_scale_control"])])
    write_csv(out / "equivalence.csv", ["check", "seed", "deviation", "control_deviation"], rows)
    return ecfg


RUNNERS = {
    "edit": _run_edit,
    "flowedit": _run_flowedit,
    "ddib": _run_ddib,
    "recon_error": _run_recon,
    "eta_sweep": _run_eta_sweep,
    "equivalence": _run_equivalence,
    "scheduler_ablation": _ablation_runner(scheduler_variants, "scheduler"),
    "shift_ablation": _ablation_runner(shift_variants, "shift"),
    "optimizer_ablation": _ablation_runner(optimizer_variants, "optimizer"),
}


# ---------------------------------------------------------------- driver

def _run_dir(root: Path, cfg: dict) -> Path:
    digest = hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:10]
    base = root / f"{cfg['scenario']}-s{cfg['seed']}-{digest}"
    path, i = base, 1
    while path.exists():
        i += 1
        path = base.with_name(f"{base.name}-{i}")
    path.mkdir(parents=True)
    return path


def run(config_path, out_root=None, seed: int | None = None, threads: int = 1) -> tuple[int, Path | None]:
    """Execute one scenario. Returns ``(exit_code, run_dir)``."""
    try:
        raw = json.loads(Path(config_path).read_text())
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return 4, None
    except json.JSONDecodeError as exc:
        print(f"error: config: invalid JSON ({exc})", file=sys.stderr)
        return 2, None
    try:
        cfg = resolve_config(raw, seed)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2, None
    if threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2, None

    root = Path(out_root or os.environ.get(OUT_ENV) or "runs")
    try:
        out = _run_dir(root, cfg)
    except OSError as exc:
        print(f"error: cannot create run directory: {exc}", file=sys.stderr)
        return 4, None
    try:
        ecfg = RUNNERS[cfg["scenario"]](cfg, out, threads)
        manifest = {"tool": "dvrflab", "version": __version__, "backend": kernels.BACKEND,
                    "seed": cfg["seed"], "config": cfg}
        if isinstance(ecfg, EditConfig):
            manifest["resolved_edit"] = ecfg.to_dict()
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except DivergenceError as exc:
        print(f"error: divergence at step {exc.step}: {exc}", file=sys.stderr)
        return 3, out
    except OSError as exc:
        print(f"error: I/O failure: {exc}", file=sys.stderr)
        return 4, out
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2, out
    print(out)
    return 0, out


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="dvrflab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run one scenario config")
    p_run.add_argument("config")
    p_run.add_argument("--out", default=None, help=f"output root (default ${OUT_ENV} or ./runs)")
    p_run.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_run.add_argument("--threads", type=int, default=1)
    args = parser.parse_args(argv)
    code, _ = run(args.config, args.out, args.seed, args.threads)
    return code


if __name__ == "__main__":
    sys.exit(main())
