"""Acceptance suite: the standard unstable configuration through the full pipeline.

Each criterion is asserted on the measured quantities (not only on the check
status) and reported as one PASS/FAIL line in the terminal summary.
"""

import json
import re
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from oseenstab.config import load_config
from oseenstab.export import export_run
from oseenstab.pipeline import build_report, run_pipeline

from conftest import ACCEPTANCE

ROOT = Path(__file__).parents[1]
STANDARD = ROOT / "configs" / "standard.toml"
SEED = 0


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    cfg = load_config(STANDARD)
    state = run_pipeline(cfg, seed=SEED, command="run")
    report = build_report(state)
    out = tmp_path_factory.mktemp("standard")
    export_run(state, report, out, "run")
    return state, report, out


def checks(report):
    return {c["id"]: c for c in report["checks"]}


def record(num, title, fn):
    try:
        detail = fn()
    except AssertionError as exc:
        ACCEPTANCE.append(f"criterion {num:2d} FAIL  {title}: {exc}")
        raise
    ACCEPTANCE.append(f"criterion {num:2d} PASS  {title}" + (f": {detail}" if detail else ""))


def test_pipeline_completed(run):
    _, report, _ = run
    assert [s["status"] for s in report["stages"]] == ["ok"] * 6
    assert report["spectrum"]["N"] == 2


def test_c01_projection(run):
    def body():
        d = checks(run[1])["AC01-projection"]["details"]
        assert d["idempotency_fro"] <= 1e-10, d
        assert d["gradient_leak_max"] <= 1e-10, d
        return f"|P^2-P|_F={d['idempotency_fro']:.2e}, max |P grad phi|/|grad phi|={d['gradient_leak_max']:.2e}"
    record(1, "projection exactness", body)


def test_c02_adjoint_identity(run):
    def body():
        d = checks(run[1])["AC02-adjoint-identity"]["details"]
        parts = []
        for label in ("zero", "unstable"):
            r = d[label]
            assert r["pooled_residual"][0] <= 0.05, (label, r)
            assert r["ratio"] >= 1.5, (label, r)
            parts.append(f"{label}: pooled {r['pooled_residual'][0]:.4f}->{r['pooled_residual'][1]:.4f} "
                         f"(x{r['ratio']:.2f}), max pair {r['max_pair_residual'][0]:.3f}")
        return "; ".join(parts)
    record(2, "adjoint identity", body)


def test_c03_tangentiality(run):
    def body():
        d = checks(run[1])["AC03-tangentiality"]["details"]
        assert d["order"] >= 1.0, d
        assert np.all(np.diff(d["normal_component_max"]) < 0), d
        return f"normal component {['%.3g' % x for x in d['normal_component_max']]}, order {d['order']:.2f}"
    record(3, "tangentiality", body)


def test_c04_counterexample(run):
    def body():
        d = checks(run[1])["AC04-counterexample"]["details"]
        assert sorted(c["a"] for c in d["cases"]) == [1.0, 2.0]
        for c in d["cases"]:
            assert c["interior_residual"] <= 1e-12 and c["cauchy_data"] <= 1e-12, c
        return "interior residual and Cauchy data <= 1e-12 for a in {1, 2}"
    record(4, "counterexample fields", body)


def test_c05_kalman_rank(run):
    def body():
        d = checks(run[1])["AC05-kalman-rank"]["details"]
        assert d["svd_tol"] == 1e-8
        assert d["ranks"] == d["ell"], d
        assert len(d["ranks"]) == run[1]["spectrum"]["M"]
        return f"ranks {d['ranks']} = ell {d['ell']}, boundary-only ranks {d['boundary_ranks']}"
    record(5, "Kalman rank", body)


def test_c06_projected_placement(run):
    def body():
        d = checks(run[1])["AC06-projected-placement"]["details"]
        assert sorted(r["factor"] for r in d["designs"]) == [1.0, 2.0]
        for r in d["designs"]:
            assert r["projected_abscissa"] <= -r["gamma1"] + 1e-6, r
        return ", ".join(f"gamma1={r['gamma1']:.4f}: abscissa {r['projected_abscissa']:.4f}" for r in d["designs"])
    record(6, "projected pole placement", body)


def test_c07_closed_loop(run):
    def body():
        state, report, _ = run
        d = checks(report)["AC07-closed-loop"]["details"]
        lam_next = state.core.spec.lam_next.real
        assert d["gamma0"] == pytest.approx(0.95 * abs(lam_next))
        assert d["abscissa"] <= -d["gamma0"], d
        assert d["relative_error"] <= 0.10, d
        return f"abscissa {d['abscissa']:.5f} <= -gamma0 = {-d['gamma0']:.5f}, fitted {d['fitted_rate']:.5f}"
    record(7, "full closed loop", body)


def test_c08_nonlinear_decay(run):
    def body():
        d = checks(run[1])["AC08-nonlinear-decay"]["details"]
        assert d["amplitude"] == 1e-3
        assert d["gamma_fit"] > 0
        for chain in ("chain_orbit", "chain_flow"):
            assert [r[0] for r in d[chain]] == [0, 1, 2, 3]
            for n, norm, bound in d[chain]:
                assert norm <= 1.1 * bound, (chain, n, norm, bound)
        assert d["limit_relative_error"] <= 0.05, d
        return (f"gamma_fit {d['gamma_fit']:.5f}, beta_T orbit {d['beta_orbit']:.4f} / flow {d['beta_flow']:.4f}, "
                f"small-amplitude rate error {d['limit_relative_error']:.1e}")
    record(8, "nonlinear local decay", body)


def test_c09_basin_monotone(run):
    def body():
        d = checks(run[1])["AC09-basin-monotone"]["details"]
        assert d["gamma_fit_2g1"] >= d["gamma_fit_g1"] - 0.10 * abs(d["gamma_fit_g1"]), d
        return f"gamma_fit(gamma1) {d['gamma_fit_g1']:.5f}, gamma_fit(2 gamma1) {d['gamma_fit_2g1']:.5f}"
    record(9, "basin monotonicity", body)


def test_c10_realification(run):
    def body():
        d = checks(run[1])["AC10-realification"]["details"]
        assert d["spectrum_distance"] <= 1e-7, d
        assert d["relative_error"] <= 0.05, d
        return f"spectrum distance {d['spectrum_distance']:.1e}, rate error {d['relative_error']:.1e}"
    record(10, "realification", body)


def test_c11_maxreg(run):
    def body():
        state, report, _ = run
        d = checks(report)["AC11-maxreg"]["details"]
        assert state.cfg.sim.maxreg_samples == 20
        c = d["constants"]
        assert len(c) == 2 and all(np.isfinite(c)), d
        assert max(c) / min(c) <= 2.0, d
        return f"constants {c[0]:.3f} (16^2), {c[1]:.3f} (32^2)"
    record(11, "maximal-regularity diagnostic", body)


def test_c12_index_gate(run):
    def body():
        d = checks(run[1])["AC12-index-gate"]["details"]
        assert d["accepted_q4_p9_8"] and d["rejected_q4_p1_2"], d
        assert "p < 2q/(2q-1)" in d["message"]
        return d["message"]
    record(12, "index gate", body)


def test_c13_determinism(run, tmp_path):
    def body():
        _, report, out = run
        out2 = tmp_path / "again"
        proc = subprocess.run([sys.executable, "-m", "oseenstab", "run", "--config", str(STANDARD),
                               "--out", str(out2), "--seed", str(SEED)], capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr[-2000:]
        stamp = re.compile(rb'"generated_at": "[^"]*"')
        a = stamp.sub(b"", (out / "report.json").read_bytes())
        b = stamp.sub(b"", (out2 / "report.json").read_bytes())
        assert a == b, "reports differ beyond the timestamp"
        assert checks(report)["AC13-determinism"]["status"] == "pass"
        return f"report.json identical modulo generated_at ({len(a)} bytes)"
    record(13, "determinism", body)


def test_report_outputs(run):
    _, report, out = run
    assert report["summary"]["passed"]
    assert [c["status"] for c in report["checks"]] == ["pass"] * 13
    rows = (out / "trajectory.csv").read_text().splitlines()
    assert rows[0].startswith("t,l2,lq,besov,nu_1")
    assert rows[0].endswith("pressure_norm")
    assert json.loads((out / "report.json").read_text())["r1_est"] > 0
