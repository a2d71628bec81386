import csv
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from isoembed.cli import main
from isoembed.grid import GridSpec, save_field
from isoembed.mesh import read_obj
from isoembed.stage import Ansatz, InitialSpec, initial_data

SMALL = {
    "variant": "spiral", "stages": 1,
    "ansatz": {"a": 100, "b": 1.14, "alpha": 0.15, "beta": 0.1, "epsilon": 0.01},
    "grid": {"points_per_axis": 201, "points_per_wave": 20, "block_rows": 256},
}


def write_cfg(path, overrides=None):
    cfg = json.loads(json.dumps(SMALL))
    for k, v in (overrides or {}).items():
        if isinstance(v, dict):
            cfg.setdefault(k, {}).update(v)
        else:
            cfg[k] = v
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("run")
    cfg = write_cfg(base / "c.json")
    outs = []
    for name in ("a", "b"):
        code = main(["run", "--config", cfg, "--out", str(base / name), "--quiet"])
        outs.append((code, base / name))
    return outs


def test_run_writes_reports(small_run):
    code, out = small_run[0]
    assert code == 0
    assert sorted(p.name for p in out.iterdir()) == [
        "config.json", "final.cigf", "final.obj", "series.csv", "stage_0.json", "summary.json"]
    with open(out / "series.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1 and rows[0]["q"] == "0"
    rep = json.loads((out / "stage_0.json").read_text())
    assert rep["passed"] and all(rep["passed"].values())
    assert rep["aborted"] is None
    assert math.isfinite(json.loads((out / "summary.json").read_text())["holder_measured"])


def test_run_is_deterministic(small_run):
    (_, a), (_, b) = small_run
    for name in ("series.csv", "final.obj", "final.cigf"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_infeasible_schedule_exit_code(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.json", {"ansatz": {"alpha": 0.99}})
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "2α<2−β" in capsys.readouterr().err


def test_stage_abort_exit_code(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", {"initial": {"p_iso": 0.0},
                                          "tolerances": {"theta_policy": "abort"}})
    out = tmp_path / "o"
    assert main(["run", "--config", cfg, "--out", str(out), "--quiet"]) == 3
    rep = json.loads((out / "stage_0.json").read_text())
    assert rep["aborted"].startswith("HypothesisViolation")


@pytest.mark.parametrize("argv", [
    ["run", "--config", "/nonexistent/c.json"],
    ["frames", "--config", "/nonexistent/c.json"],
    ["export-mesh", "/nonexistent/f.cigf"],
])
def test_io_errors_exit_one(argv, tmp_path):
    assert main(argv + ["--out", str(tmp_path), "--quiet"]) == 1


def test_bad_config_key_exit_one(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{"stagez": 1}')
    assert main(["run", "--config", str(p), "--quiet"]) == 1


def test_export_mesh_inclusion(tmp_path):
    ans = Ansatz(100, 1.14, 0.15, 0.1, 0.01)
    g = GridSpec.ball(2, 41, 0.1)
    d = initial_data(g, "strain", InitialSpec(kind="inclusion"), ans)
    save_field(tmp_path / "f.cigf", d.f0)
    out = tmp_path / "m.obj"
    assert main(["export-mesh", str(tmp_path / "f.cigf"), "--coords", "1,2,3",
                 "--out", str(out), "--quiet"]) == 0
    V, F = read_obj(out)
    assert len(V) == int(d.f0.valid.sum())
    assert np.all(V[:, 2] == 0)
    assert main(["export-mesh", str(tmp_path / "f.cigf"), "--coords", "1,2,9",
                 "--out", str(out), "--quiet"]) == 1
    assert main(["export-mesh", str(tmp_path / "f.cigf"), "--coords", "1,1,2",
                 "--out", str(out), "--quiet"]) == 1


def test_decompose_baseline(tmp_path, capsys):
    assert main(["decompose", "--out", str(tmp_path)]) == 0
    lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith("A_")]
    assert len(lines) == 3
    for l in lines:
        assert abs(float(l.split("=")[1]) - math.sqrt(2 / 3)) <= 1e-12
    rep = json.loads((tmp_path / "decompose.json").read_text())
    assert rep["residual"] <= 1e-12


def test_kallen_toy(tmp_path):
    assert main(["kallen-toy", "--out", str(tmp_path), "--quiet"]) == 0
    lines = (tmp_path / "kallen_trace.jsonl").read_text().splitlines()
    assert [json.loads(l)["step"] for l in lines] == list(range(1, 7))
    assert set(json.loads(lines[0])) == {"step", "E0", "E1", "E2", "da0", "rho"}


def test_frames(tmp_path):
    cfg = tmp_path / "f.json"
    cfg.write_text('{"points": 65}')
    assert main(["frames", "--config", str(cfg), "--out", str(tmp_path), "--quiet"]) == 0
    rep = json.loads((tmp_path / "frames.json").read_text())
    assert rep["orthogonality"] <= 1e-10 and rep["ok"]


def test_mollify_bench(tmp_path):
    cfg = tmp_path / "m.json"
    cfg.write_text('{"points": 513, "ells": [0.08, 0.04, 0.02]}')
    assert main(["mollify-bench", "--config", str(cfg), "--out", str(tmp_path), "--quiet"]) == 0
    rep = json.loads((tmp_path / "mollify.json").read_text())
    assert all(rep["passed"].values())


def test_module_entry_point_help():
    r = subprocess.run([sys.executable, "-m", "isoembed.cli", "--help"], capture_output=True,
                       text=True)
    assert r.returncode == 0
    for cmd in ("run", "decompose", "frames", "mollify-bench", "kallen-toy", "export-mesh"):
        assert cmd in r.stdout
