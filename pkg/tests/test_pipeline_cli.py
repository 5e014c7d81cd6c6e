import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np

from oseenstab import checks as checks_mod
from oseenstab.cli import main
from oseenstab.config import CHECK_IDS, parse_config
from oseenstab.export import trajectory_header, write_trajectory_csv
from oseenstab.pipeline import build_report, report_json, run_pipeline, stage_rngs

ROOT = Path(__file__).parents[1]

REST = """[mesh]
dims = 16
[physics]
nu0 = 0.01
equilibrium = "zero"
[sim]
basin = false
[output]
log_stride = 20
[verify]
checks = ["AC05-kalman-rank", "AC07-closed-loop", "AC12-index-gate"]
"""

UNSTABLE = """[mesh]
dims = 16
patch_side = "left"
[physics]
nu0 = 0.01
profile = "shear-cell"
amplitude = 2.0
[sim]
amplitudes = [1e-4]
basin = false
[output]
log_stride = 50
[verify]
checks = ["AC05-kalman-rank", "AC06-projected-placement", "AC07-closed-loop", "AC10-realification"]
"""

SECTIONS = ["schema", "generated_at", "provenance", "config", "stages", "mesh", "equilibrium", "spectrum",
            "controllability", "design", "closed_loop", "simulation", "r1_est", "maxreg", "checks", "summary"]


def write(tmp_path, text, name="run.toml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_check_only(capsys):
    assert main(["run", "--config", str(ROOT / "configs" / "standard.toml"), "--check-only"]) == 0
    assert "config ok" in capsys.readouterr().out


def test_config_error_exit(tmp_path, capsys):
    p = write(tmp_path, "[mesh]\ndims = 16\n[physics]\nequilibrium = \"zero\"\n")
    assert main(["mesh", "--config", p, "--check-only"]) == 1
    err = capsys.readouterr().err
    assert "physics.nu0 required" in err and "line 3" in err


def test_gate_error_exit(tmp_path, capsys):
    p = write(tmp_path, "[physics]\nnu0 = 0.01\n[norms]\nq = 4\np = 1.2\n")
    assert main(["mesh", "--config", p]) == 1
    assert "p < 2q/(2q-1) violated" in capsys.readouterr().err


def test_mesh_command(tmp_path):
    out = tmp_path / "o"
    assert main(["mesh", "--config", write(tmp_path, REST), "--out", str(out)]) == 0
    rows = np.loadtxt(out / "mesh_boundary.txt")
    assert rows.shape == (64, 5)
    rep = json.loads((out / "report.json").read_text())
    assert [s["name"] for s in rep["stages"]] == ["mesh"]
    assert list(rep) == SECTIONS
    assert rep["spectrum"] is None and rep["simulation"] is None
    assert all(c["status"] == "not_run" or c["status"] == "disabled" for c in rep["checks"])


def test_rest_run(tmp_path, capsys):
    out = tmp_path / "o"
    code = main(["run", "--config", write(tmp_path, REST), "--out", str(out), "--seed", "3"])
    text = capsys.readouterr().out
    assert code == 0
    assert "no control needed" in text
    rep = json.loads((out / "report.json").read_text())
    assert list(rep) == SECTIONS
    status = {c["id"]: c["status"] for c in rep["checks"]}
    assert status["AC12-index-gate"] == "pass"
    assert status["AC05-kalman-rank"] == "skipped"
    assert status["AC01-projection"] == "disabled"
    with open(out / "trajectory.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t", "l2", "lq", "besov", "pressure_norm"]
    assert len(rows) - 1 == 2000 // 20 + 1
    assert (out / "spectrum.csv").exists() and (out / "equilibrium.csv").exists()


def test_unstable_run(tmp_path):
    cfg = parse_config(UNSTABLE)
    state = run_pipeline(cfg, seed=0, command="run")
    rep = build_report(state)
    assert rep["summary"]["passed"], rep["summary"]
    status = {c["id"]: c["status"] for c in rep["checks"]}
    for cid in ("AC05-kalman-rank", "AC06-projected-placement", "AC07-closed-loop", "AC10-realification"):
        assert status[cid] == "pass"
    from oseenstab.export import export_run
    paths = export_run(state, rep, tmp_path, "run")
    header = (tmp_path / "trajectory.csv").read_text().splitlines()[0].split(",")
    kb = state.core.law.p.shape[1]
    assert header == trajectory_header(kb, kb)
    assert any(p.name == "report.json" for p in paths)


def test_failing_check_sets_exit_code(tmp_path, monkeypatch, capsys):
    monkeypatch.setitem(checks_mod.CHECKS, "AC12-index-gate",
                        lambda state, rng: {"status": "fail", "details": {}})
    code = main(["verify", "--config", write(tmp_path, REST), "--out", str(tmp_path / "o")])
    assert code == 1
    assert "failing checks: AC12-index-gate" in capsys.readouterr().err


def test_stage_failure_recorded(tmp_path):
    cfg = parse_config(REST.replace('equilibrium = "zero"', 'equilibrium = "newton"\nforce_file = "missing.csv"'))
    state = run_pipeline(cfg, command="design")
    rep = build_report(state)
    st = {s["name"]: s["status"] for s in rep["stages"]}
    assert st["equilibrium"] == "failed" and st["spectrum"] == "skipped"
    assert rep["summary"]["failed_stages"] == ["equilibrium"]


def test_report_deterministic_modulo_timestamp():
    cfg = parse_config(UNSTABLE)
    a = build_report(run_pipeline(cfg, seed=5, command="design"))
    b = build_report(run_pipeline(cfg, seed=5, command="design"))
    a["generated_at"] = b["generated_at"] = ""
    assert report_json(a) == report_json(b)


def test_stage_rngs_independent():
    r = stage_rngs(7)
    assert set(r) >= {"design", "simulate", "verify"}
    assert stage_rngs(7)["simulate"].random() == r["simulate"].random()
    assert r["design"].random() != r["verify"].random()


def test_empty_trajectory_header_only(tmp_path):
    p = tmp_path / "t.csv"
    write_trajectory_csv(None, p)
    assert p.read_text().strip() == "t,l2,lq,besov,pressure_norm"


def test_every_check_reported_once():
    rep = build_report(run_pipeline(parse_config(REST), command="mesh"))
    assert [c["id"] for c in rep["checks"]] == list(CHECK_IDS)


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "oseenstab", "mesh", "--config", write(tmp_path, REST),
                        "--check-only"], capture_output=True, text=True)
    assert r.returncode == 0 and "config ok" in r.stdout


def test_unwritable_output(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["mesh", "--config", write(tmp_path, REST), "--out", str(blocker / "sub")]) == 1
    assert "export error" in capsys.readouterr().err
