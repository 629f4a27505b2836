import csv
import json
import re

import numpy as np
import pytest

from divgov import cli
from divgov.lmi import LmiResult


def run(*argv):
    return cli.main([str(a) for a in argv])


def rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_simulate_global_point(tmp_path):
    out = tmp_path / "sim"
    assert run("simulate", "--A", 1.4, "--B", 1, "--C", 0, "--x0", "0,1,0", "--out", out) == 0
    r = rows(out / "trajectory.csv")
    assert r[0] == ["t", "x1", "x2", "x3", "mode"]
    s = json.loads((out / "summary.json").read_text())
    assert s["outcome"] == "stationary" and s["distance_to_set"] < 2e-3
    assert (out / "phase.svg").exists()
    num = re.compile(r"^-?\d\.\d{16}e[+-]\d{2}$")
    assert all(num.match(v) for v in r[-1][:4])


def test_simulate_sustained_oscillation(tmp_path):
    rep = tmp_path / "hunt"
    assert run("hunt", "--A", 0.75, "--B", 1, "--C", 0, "--out", rep, "--no-svg") == 0
    q = json.loads((rep / "report.json").read_text())["cycle"]["section_point"]
    out = tmp_path / "sim"
    assert run("simulate", "--A", 0.75, "--B", 1, "--x0", f"{q[0]!r},0,{q[1]!r}", "--t-max", 40, "--out", out, "--no-svg") == 0
    X = np.array([[float(v) for v in r[1:4]] for r in rows(out / "trajectory.csv")[1:]])
    tail = X[len(X) // 2 :]
    assert np.max(np.abs(tail[:, 1])) > 1.0


def test_missing_flag_is_usage_error(tmp_path):
    assert run("simulate", "--A", 1.4, "--x0", "0,1,0", "--out", tmp_path) == 2
    assert run("simulate", "--A", 1.4, "--B", 1, "--out", tmp_path) == 2
    assert run("simulate", "--A", -1, "--B", 1, "--x0", "0,1,0", "--out", tmp_path) == 2
    assert run("simulate", "--A", 1, "--B", 1, "--x0", "0,1", "--out", tmp_path) == 2
    assert run("bogus") == 2


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert run("simulate", "--A", 1.4, "--B", 1, "--x0", "0,1,0", "--out", blocker / "sub") != 0


def test_lmi_examples(tmp_path, capsys):
    assert run("lmi", "--A", 1.4, "--B", 1, "--C", 0, "--out", tmp_path) == 0
    assert "verdict=feasible" in capsys.readouterr().out
    cert = json.loads((tmp_path / "certificate.json").read_text())
    assert len(cert["Q"]) == 6 and cert["verdict"] == "feasible"
    assert run("lmi", "--A", 0.75, "--B", 1, "--C", 0, "--out", tmp_path) == 0
    assert "verdict=infeasible" in capsys.readouterr().out


def test_lmi_self_regulation_example(tmp_path, capsys):
    # stated as feasible; not reachable because the linear part is not Hurwitz (README)
    run("lmi", "--A", 0.75, "--B", 1, "--C", 0.1, "--out", tmp_path)
    assert "verdict=feasible" in capsys.readouterr().out


def test_lmi_undetermined_exit_code(tmp_path, monkeypatch):
    monkeypatch.setattr(cli, "lmi_verdict", lambda *a, **k: LmiResult("undetermined", None, 1.0, (0.0, 0.0), 3000))
    assert run("lmi", "--A", 1, "--B", 1, "--out", tmp_path) == 1


def test_hunt_examples(tmp_path, capsys):
    assert run("hunt", "--A", 0.75, "--B", 1, "--C", 0, "--out", tmp_path / "a") == 0
    assert "hidden=true" in capsys.readouterr().out
    assert (tmp_path / "a" / "portrait.svg").exists()
    assert run("hunt", "--A", 1.4, "--B", 1, "--C", 0, "--out", tmp_path / "b", "--no-svg") == 0
    assert "hidden=false" in capsys.readouterr().out
    # unstable point: reported, not asserted
    assert run("hunt", "--A", 0.5, "--B", 1, "--C", 0, "--out", tmp_path / "c", "--no-svg") == 0
    rep = json.loads((tmp_path / "c" / "report.json").read_text())
    assert sum(rep["counts"].values()) == len(rep["starts"])


def test_region2d_wform_is_exact(tmp_path):
    assert run("region2d", "--method", "wform", "--C", 0, "--alpha", 0, "--simulate", "off", "--out", tmp_path) == 0
    r = rows(tmp_path / "grid.csv")
    h = r[0]
    for row in r[1:]:
        a, b = float(row[h.index("A")]), float(row[h.index("B")])
        assert (row[h.index("fused")] == "GloballyStable") == (a * b >= 1)
    assert (tmp_path / "region.svg").exists()


def test_region2d_self_regulation_grows(tmp_path):
    common = ["--A-step", 0.2, "--B-step", 0.2, "--method", "lmi,wform", "--simulate", "off", "--no-svg"]
    assert run("region2d", "--C", 0, *common, "--out", tmp_path / "c0") == 0
    assert run("region2d", "--C", 0.5, "--alpha", 1, *common, "--out", tmp_path / "c5") == 0
    n0 = json.loads((tmp_path / "c0" / "grid.json").read_text())["counts"]["GloballyStable"]
    n5 = json.loads((tmp_path / "c5" / "grid.json").read_text())["counts"]["GloballyStable"]
    assert n5 > n0


def test_region2d_refine(tmp_path):
    args = ["--A-step", 0.1, "--B-min", 1, "--B-max", 1, "--method", "wform", "--simulate", "off", "--refine-passes", 10, "--no-svg"]
    assert run("region2d", *args, "--out", tmp_path) == 0
    (t,) = rows(tmp_path / "transitions.csv")[1:]
    assert abs(float(t[3]) - 1.0) < 0.002


def test_region3d(tmp_path):
    args = ["--A-step", 0.4, "--B-step", 0.4, "--C-step", 0.35]
    assert run("region3d", *args, "--out", tmp_path) == 0
    assert rows(tmp_path / "boundary.csv")[0] == ["A", "B", "C"]
    assert (tmp_path / "boundary3d.svg").exists()


def test_deterministic_outputs_and_svg_independence(tmp_path):
    args = ["region2d", "--A-step", 0.2, "--B-step", 0.2, "--C", 0.5, "--simulate", "off"]
    assert run(*args, "--out", tmp_path / "x") == 0
    assert run(*args, "--out", tmp_path / "y") == 0
    assert run(*args, "--out", tmp_path / "z", "--no-svg") == 0
    for name in ("grid.csv", "grid.json", "region.svg"):
        assert (tmp_path / "x" / name).read_bytes() == (tmp_path / "y" / name).read_bytes()
    for name in ("grid.csv", "grid.json"):
        assert (tmp_path / "x" / name).read_bytes() == (tmp_path / "z" / name).read_bytes()


def test_manifest(tmp_path):
    assert run("lmi", "--A", 1.4, "--B", 1, "--out", tmp_path) == 0
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["command"] == "lmi" and len(m["config_hash"]) == 64
    assert [f["path"] for f in m["files"]] == ["certificate.json"]


def test_config_file(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# sample point\nA = 0.75\nB = 1\neps-pd = 1e-6\n")
    assert run("lmi", "--config", cfg, "--out", tmp_path / "o") == 0
    assert "verdict=infeasible" in capsys.readouterr().out
    assert run("lmi", "--config", cfg, "--A", 1.4, "--out", tmp_path / "o") == 0
    assert "verdict=feasible" in capsys.readouterr().out
    cfg.write_text("A=1\nB=1\ncolour=red\n")
    assert run("lmi", "--config", cfg, "--out", tmp_path / "o") == 2
    cfg.write_text("A=one\n")
    assert run("lmi", "--config", cfg, "--out", tmp_path / "o") == 2
    assert run("lmi", "--config", tmp_path / "missing.cfg", "--out", tmp_path / "o") == 2


def test_seed_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("DIVGOV_SEED", "17")
    assert run("lmi", "--A", 1.4, "--B", 1, "--out", tmp_path) == 0
    assert json.loads((tmp_path / "manifest.json").read_text())["config"]["seed"] == 17
    monkeypatch.setenv("DIVGOV_SEED", "x")
    assert run("lmi", "--A", 1.4, "--B", 1, "--out", tmp_path) == 2
