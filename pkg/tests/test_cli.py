import json
import subprocess
import sys
from pathlib import Path

import pytest

from dvrflab.cli import OUT_ENV, emit_svg, main, resolve_config, run
from dvrflab.errors import ConfigError
from dvrflab.io import write_csv

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def _write(tmp_path, cfg, name="c.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


SMALL = {"scenario": "eta_sweep", "seed": 1, "params": {"etas": [0.0, 1.0], "n_seeds": 2}}


def test_eta_sweep_header(tmp_path):
    code, out = run(_write(tmp_path, SMALL), tmp_path / "runs")
    assert code == 0
    assert (out / "etasweep.csv").read_text().splitlines()[0] == "eta,seed,S_R,update_energy"
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 1 and manifest["config"]["params"]["etas"] == [0.0, 1.0]
    assert "version" in manifest


def test_fresh_run_directories(tmp_path):
    cfg = _write(tmp_path, SMALL)
    _, a = run(cfg, tmp_path / "runs")
    _, b = run(cfg, tmp_path / "runs")
    assert a != b and a.parent == b.parent
    for name in ("etasweep.csv", "etasweep_summary.csv", "etasweep_S_R.svg"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_manifest_reproduces_run(tmp_path):
    _, a = run(_write(tmp_path, SMALL), tmp_path / "runs")
    cfg = json.loads((a / "manifest.json").read_text())["config"]
    _, b = run(_write(tmp_path, cfg, "again.json"), tmp_path / "runs")
    assert (a / "etasweep.csv").read_bytes() == (b / "etasweep.csv").read_bytes()


def test_threads_do_not_change_output(tmp_path):
    cfg = _write(tmp_path, SMALL)
    _, a = run(cfg, tmp_path / "runs", threads=1)
    _, b = run(cfg, tmp_path / "runs", threads=3)
    assert (a / "etasweep.csv").read_bytes() == (b / "etasweep.csv").read_bytes()


def test_invalid_scenario(tmp_path, capsys):
    code, _ = run(_write(tmp_path, {"scenario": "bogus", "seed": 0}), tmp_path / "runs")
    assert code == 2
    assert "scenario" in capsys.readouterr().err
    assert not (tmp_path / "runs").exists()


@pytest.mark.parametrize("cfg,field", [
    ({"scenario": "edit"}, "seed"),
    ({"scenario": "edit", "seed": -1}, "seed"),
    ({"scenario": "edit", "seed": 0, "colour": 1}, "colour"),
    ({"scenario": "edit", "seed": 0, "params": {"n_seeds": 3}}, "params.n_seeds"),
    ({"scenario": "edit", "seed": 0, "edit": {"optimizer": "adagrad"}}, "edit"),
    ({"scenario": "edit", "seed": 0, "task": {"sigma": 1}}, "task.sigma"),
])
def test_schema_errors(tmp_path, capsys, cfg, field):
    code, _ = run(_write(tmp_path, cfg), tmp_path / "runs")
    assert code == 2
    assert field in capsys.readouterr().err


def test_invalid_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    assert run(p, tmp_path / "runs")[0] == 2


def test_missing_config_is_io_error(tmp_path):
    assert run(tmp_path / "missing.json", tmp_path / "runs")[0] == 4


def test_unwritable_output_is_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run(_write(tmp_path, SMALL), blocker / "runs")[0] == 4


def test_divergence_exit_code(tmp_path, capsys):
    cfg = {"scenario": "edit", "seed": 0, "task": {"mu": [50.0], "variance": [1.0]},
           "edit": {"lr": 1e5}}
    code, _ = run(_write(tmp_path, cfg), tmp_path / "runs")
    assert code == 3
    assert "divergence" in capsys.readouterr().err


def test_seed_override(tmp_path):
    _, out = run(_write(tmp_path, SMALL), tmp_path / "runs", seed=7)
    assert json.loads((out / "manifest.json").read_text())["seed"] == 7


def test_env_output_root(tmp_path, monkeypatch):
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "envroot"))
    code, out = run(_write(tmp_path, SMALL))
    assert code == 0 and out.parent == tmp_path / "envroot"


def test_main_entry(tmp_path):
    assert main(["run", str(_write(tmp_path, SMALL)), "--out", str(tmp_path / "r"),
                 "--threads", "2", "--seed", "3"]) == 0


def test_console_module(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "dvrflab.cli", "run",
                           str(_write(tmp_path, {"scenario": "nope", "seed": 0})),
                           "--out", str(tmp_path / "r")], capture_output=True, text=True)
    assert proc.returncode == 2 and "scenario" in proc.stderr


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.json")), ids=lambda p: p.stem)
def test_shipped_configs(tmp_path, path):
    code, out = run(path, tmp_path / "runs")
    assert code == 0
    assert list(out.glob("*.csv"))
    # nothing escapes the run directory
    assert sorted(p.name for p in (tmp_path / "runs").iterdir()) == [out.name]


def test_resolve_defaults():
    cfg = resolve_config({"scenario": "shift_ablation", "seed": 2})
    assert cfg["params"]["n_seeds"] == 10 and cfg["task"]["mu"] == [4.0, 1.0]
    with pytest.raises(ConfigError):
        resolve_config({"scenario": "edit", "seed": 0, "field": {}, "task": {}})


def test_svg_single_polyline(tmp_path):
    p = tmp_path / "two.csv"
    write_csv(p, ["x", "y"], [[0.0, 1.0], [1.0, 3.0]])
    svg = emit_svg(p, "x", "y").read_text()
    assert svg.count("<polyline") == 1 and svg.startswith("<svg")
    assert "x</text>" in svg and "y</text>" in svg


def test_svg_grouped(tmp_path):
    p = tmp_path / "g.csv"
    write_csv(p, ["eta", "seed", "S_R"], [[e, s, 1 + e * s] for e in (0.0, 0.5, 1.0) for s in range(3)])
    out = emit_svg(p, "seed", "S_R", "eta")
    assert out.read_text().count("<polyline") == 3
    first = out.read_bytes()
    assert emit_svg(p, "seed", "S_R", "eta").read_bytes() == first


def test_svg_errors(tmp_path):
    p = tmp_path / "empty.csv"
    write_csv(p, ["x", "y"], [])
    with pytest.raises(ConfigError):
        emit_svg(p, "x", "y")
    write_csv(p, ["x", "y"], [[1.0, 2.0]])
    with pytest.raises(ConfigError):
        emit_svg(p, "x", "z")
