"""Stage orchestration: mesh -> equilibrium -> spectrum -> design -> simulate -> verify.

Each stage records a status entry; an exception aborts the remaining stages
but still yields a report, so partial failures are never silent.  All
randomness flows from one seed split per stage.
"""

from __future__ import annotations

import json
import logging
import math
import platform
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np
import scipy

from . import __version__
from .config import CHECK_IDS, RunConfig
from .feedback import (abscissa, assemble_closed_loop, block_structure_residual,
                       build_projected_system, design_gains, empty_law, lift_gains, realify)
from .mesh import setup_mesh
from .norms import NormSuite, StokesBasis, besov_surrogate, field_lq
from .operators import (Equilibrium, MACGrid, assemble_dirichlet_map, assemble_oseen, cells_to_faces,
                        load_field_csv, manufactured_field, random_solenoidal, solve_equilibrium)
from .simulation import (basin_search, default_horizon, fit_decay, simulate_linear, simulate_nonlinear)
from .spectral import compute_spectrum, spectral_projector, stable_abscissa
from .stabilizability import select_actuators

log = logging.getLogger(__name__)

STAGES = ("mesh", "equilibrium", "spectrum", "design", "simulate", "verify")
COMMAND_STAGES = {
    "mesh": 1, "equilibrium": 2, "spectrum": 3, "design": 4, "simulate": 5, "verify": 6, "run": 6,
}
DIGITS = 12


class StageError(RuntimeError):
    def __init__(self, stage, diagnostic):
        self.stage = stage
        self.diagnostic = diagnostic
        super().__init__(f"stage '{stage}' failed: {diagnostic}")


def stage_rngs(seed):
    """One independent PCG64 stream per stage, split from the run seed."""
    children = np.random.SeedSequence(seed).spawn(len(STAGES))
    return {name: np.random.Generator(np.random.PCG64(s)) for name, s in zip(STAGES, children)}


def clean(x):
    """JSON-ready copy with floats rounded to a fixed number of significant digits."""
    if isinstance(x, dict):
        return {str(k): clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return clean(x.tolist())
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (complex, np.complexfloating)):
        return [clean(x.real), clean(x.imag)]
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if not math.isfinite(x):
            return None
        return float(f"{x:.{DIGITS}g}") if x != 0 else 0.0
    return x


# ---------------------------------------------------------------------------
# the reusable core: everything up to the feedback design on one grid


@dataclass
class Design:
    factor: float
    gamma1: float
    Kg: np.ndarray
    law: object
    closed: object
    projected_abscissa: float


@dataclass
class Core:
    cfg: RunConfig
    dims: tuple
    mesh: object = None
    grid: MACGrid = None
    eq: Equilibrium = None
    ops: object = None
    spec: object = None
    act: object = None
    ctrl: object = None
    psys: object = None
    designs: list = field(default_factory=list)
    _open: object = None

    @property
    def law(self):
        return self.designs[0].law if self.designs else empty_law(self.ops)

    @property
    def closed(self):
        if self.designs:
            return self.designs[0].closed
        if self._open is None:
            self._open = assemble_closed_loop(self.ops, empty_law(self.ops))
        return self._open

    @property
    def needs_control(self):
        return self.spec is not None and self.spec.N > 0


def build_mesh_stage(core: Core):
    m = core.cfg.mesh
    core.mesh = setup_mesh(core.dims, m.lengths, m.patch_side, m.patch_fraction, m.collar_depth)
    if core.mesh.d == 2:
        core.grid = MACGrid(core.mesh)


def equilibrium_force(cfg: RunConfig, grid: MACGrid):
    ph = cfg.physics
    if ph.force_file:
        return cells_to_faces(grid, load_field_csv(grid, ph.force_file))
    ye = manufactured_field(grid, ph.amplitude, ph.profile)
    return solve_equilibrium(grid, ph.nu0, "manufactured", ye=ye).f


def build_equilibrium_stage(core: Core):
    ph = core.cfg.physics
    g = core.grid
    if g is None:
        raise StageError("equilibrium", "d=3 meshes support the mesh stage only")
    if ph.equilibrium == "zero":
        z = np.zeros(g.n)
        core.eq = Equilibrium(z, np.zeros(g.ncell), z.copy(), 0.0, 0, True, 0.0)
    elif ph.equilibrium == "manufactured":
        ye = manufactured_field(g, ph.amplitude, ph.profile)
        core.eq = solve_equilibrium(g, ph.nu0, "manufactured", ye=ye, amplitude=ph.amplitude)
    else:
        f = equilibrium_force(core.cfg, g)
        core.eq = solve_equilibrium(g, ph.nu0, "newton", f=f, max_iter=ph.newton_max_iter)
        if not core.eq.converged:
            raise StageError("equilibrium", f"Newton did not converge (residual {core.eq.residual_norm:.3e})")


def build_spectrum_stage(core: Core):
    dz = core.cfg.design
    core.ops = assemble_oseen(core.grid, core.cfg.physics.nu0, core.eq.ye)
    assemble_dirichlet_map(core.ops)
    core.spec = compute_spectrum(core.ops, dz.n_eigs, method=dz.eig_method)
    spectral_projector(core.spec, dz.projector)


def build_design_stage(core: Core, rng):
    dz = core.cfg.design
    spec, ops = core.spec, core.ops
    core.designs = []
    if spec.N == 0:
        return
    core.act, core.ctrl = select_actuators(spec, ops, dz.strategy, rng=rng, max_retries=dz.max_retries,
                                           svd_tol=dz.svd_tol)
    core.psys = build_projected_system(spec, ops, core.act)
    lam1 = abs(spec.eigenvalues[0].real)
    for factor in (dz.gamma1_factor, 2 * dz.gamma1_factor):
        g1 = factor * lam1
        Kg = design_gains(core.psys, g1, dz.method)
        law = lift_gains(core.psys, Kg, spec, core.act, g1)
        cl = assemble_closed_loop(ops, law, spec.gamma0)
        core.designs.append(Design(factor, g1, Kg, law, cl, abscissa(core.psys.Lam - core.psys.B @ Kg)))


def build_core(cfg: RunConfig, dims=None, rng=None, upto="design") -> Core:
    """Run the deterministic stages on a (possibly different) grid size."""
    core = Core(cfg, tuple(dims or cfg.mesh.dims))
    build_mesh_stage(core)
    build_equilibrium_stage(core)
    build_spectrum_stage(core)
    if upto == "design":
        build_design_stage(core, rng if rng is not None else np.random.default_rng(0))
    return core


def unit_probe(core: Core, kind="dominant", seed=0):
    g = core.grid
    if kind == "random":
        z = random_solenoidal(g, np.random.default_rng(seed), clamp=False)
    else:
        phi = core.spec.phi[:, 0]
        z = phi.real if np.linalg.norm(phi.real) >= np.linalg.norm(phi.imag) else phi.imag
    return z / np.sqrt(g.vol * np.sum(z ** 2))


# ---------------------------------------------------------------------------
# state and stage runner


@dataclass
class RunState:
    cfg: RunConfig
    seed: int
    core: Core = None
    stages: list = field(default_factory=list)
    sim: dict = field(default_factory=dict)
    maxreg: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)
    rngs: dict = field(default_factory=dict)

    def ok(self, stage):
        return any(s["name"] == stage and s["status"] == "ok" for s in self.stages)


def _simulate_stage(state: RunState, rng):
    cfg, core = state.cfg, state.core
    s, o = cfg.sim, cfg.output
    ops, spec, grid = core.ops, core.spec, core.grid
    gamma0 = spec.gamma0
    T_auto, dt_auto = default_horizon(gamma0)
    T = s.T or T_auto
    dt = s.dt or T / 2000
    Tc = s.contraction_fraction * T
    probe = unit_probe(core, s.probe, s.probe_seed)
    law = core.law
    cl = core.closed
    out = {"T": T, "dt": dt, "T_contraction": Tc, "probe": probe}

    lin = simulate_linear(cl.AF, probe, T, dt, ops=ops, law=law if law.n_channels else None)
    out["linear"] = lin
    out["linear_fit"] = fit_decay(lin.times, lin.l2, T=Tc)
    if core.needs_control:
        rl = realify(law)
        clr = assemble_closed_loop(ops, rl)
        lin_r = simulate_linear(clr.AF, probe, T, dt, ops=ops, law=rl)
        out["real_law"] = rl
        out["real_closed"] = clr
        out["real_fit"] = fit_decay(lin_r.times, lin_r.l2, T=Tc)
        out["open_fit"] = fit_decay(*_open_loop(ops, probe, gamma0))

    suite = NormSuite(cfg.norms.q, cfg.norms.p, 2, h=min(grid.hx, grid.hy), n_t=cfg.norms.n_t)
    stokes = StokesBasis(ops)
    norms = {"lq": lambda z: field_lq(grid, z, suite.q), "besov": lambda z: besov_surrogate(z, suite, stokes)}
    runs = {}
    for k, amp in enumerate(s.amplitudes):
        logged = k == 0
        tr = simulate_nonlinear(ops, law if law.n_channels else None, amp * probe, T, dt,
                                norms=norms if logged else None, stride=o.snapshot_stride if logged else 0,
                                pressure=logged, record_every=o.log_stride)
        runs[amp] = tr
    out["nonlinear"] = runs
    out["nonlinear_fit"] = {a: _safe_fit(tr, Tc) for a, tr in runs.items()}
    out["logged"] = runs[s.amplitudes[0]]
    if len(core.designs) > 1:
        amp = s.amplitudes[0]
        tr2 = simulate_nonlinear(ops, core.designs[1].law, amp * probe, T, dt, record_every=o.log_stride)
        out["nonlinear_2g1"] = tr2
        out["nonlinear_2g1_fit"] = _safe_fit(tr2, Tc)
    if s.basin:
        out["basin"] = basin_search(ops, law if law.n_channels else None, probe, Tc, dt,
                                    a_lo=min(s.amplitudes), a_hi=s.basin_max, n_bisect=s.basin_bisections)
    state.sim = out


def _open_loop(ops, probe, gamma0):
    # short open-loop run: growth of the unstable mode
    lam = ops.oseen_reduced
    T = 5.0
    tr = simulate_linear(lam, probe, T, T / 500, ops=ops)
    return tr.times, tr.l2


def _safe_fit(tr, Tc):
    if tr.blowup or len(tr.times) < 20:
        return None
    try:
        return fit_decay(tr.times, tr.l2, T=Tc)
    except ValueError:
        return None


def run_pipeline(cfg: RunConfig, seed=0, command="run") -> RunState:
    """Execute the stages required by ``command``; failures are recorded, not raised."""
    from .checks import evaluate_checks

    state = RunState(cfg, int(seed))
    state.rngs = stage_rngs(state.seed)
    n_stages = COMMAND_STAGES[command]
    core = Core(cfg, tuple(cfg.mesh.dims))
    state.core = core
    actions = {
        "mesh": lambda: build_mesh_stage(core),
        "equilibrium": lambda: build_equilibrium_stage(core),
        "spectrum": lambda: build_spectrum_stage(core),
        "design": lambda: build_design_stage(core, state.rngs["design"]),
        "simulate": lambda: _simulate_stage(state, state.rngs["simulate"]),
        "verify": lambda: evaluate_checks(state, state.rngs["verify"]),
    }
    failed = None
    for k, name in enumerate(STAGES):
        if k >= n_stages:
            break
        if failed is not None:
            state.stages.append({"name": name, "status": "skipped", "message": f"after failure in {failed}"})
            continue
        try:
            actions[name]()
            msg = ""
            if name == "design" and not core.needs_control:
                msg = "no control needed"
            state.stages.append({"name": name, "status": "ok", "message": msg})
        except Exception as exc:  # stage-level capture; the report carries the diagnostic
            failed = name
            diag = exc.diagnostic if isinstance(exc, StageError) else f"{type(exc).__name__}: {exc}"
            log.error("stage '%s' failed: %s", name, diag)
            state.stages.append({"name": name, "status": "failed", "message": diag})
    if command in ("verify", "run") and failed is not None:
        # checks that do not depend on the failed stage still run
        evaluate_checks(state, state.rngs["verify"])
    return state


# ---------------------------------------------------------------------------
# report


def _fit_dict(fit):
    return None if fit is None else fit.to_dict()


def _eig_list(lam, n=10):
    return [[float(z.real), float(z.imag)] for z in np.asarray(lam)[:n]]


def core_sections(core: Core):
    """Report sections produced by the deterministic stages (mesh to design)."""
    sec = {}
    if core.mesh is not None:
        m = core.mesh
        sec["mesh"] = {"dims": list(m.dims), "lengths": list(m.lengths), "d": m.d, "h": list(m.h),
                       "boundary_nodes": m.n_boundary, "patch_nodes": len(m.patch_nodes),
                       "collar_cells": int(m.collar_mask.sum()), "collar_depth": m.collar_depth}
    if core.eq is not None:
        e = core.eq
        sec["equilibrium"] = {"mode": core.cfg.physics.equilibrium, "residual": e.residual_norm,
                              "iterations": e.iterations, "converged": e.converged,
                              "l2_norm": float(np.sqrt(core.grid.vol * np.sum(e.ye ** 2)))}
    if core.spec is not None:
        sp_ = core.spec
        sec["spectrum"] = {
            "method": sp_.method, "n_computed": len(sp_.eigenvalues), "N": sp_.N, "M": sp_.M,
            "ell": list(sp_.multiplicities), "K": sp_.K,
            "unstable": _eig_list(sp_.eigenvalues[: sp_.N], sp_.N),
            "lambda_next": sp_.lam_next, "gamma0": sp_.gamma0,
            "stable_abscissa": stable_abscissa(sp_, sp_.PN),
            "max_residual": float(np.max(sp_.residuals)),
            "k_shift": core.ops.k_shift, "k_history": core.ops.k_history,
            "eigenvalues": _eig_list(sp_.eigenvalues, len(sp_.eigenvalues)),
        }
    if core.spec is not None and core.ops is not None:
        if not core.needs_control:
            sec["controllability"] = {"passed": True, "boundary_only_passed": True, "clusters": [],
                                      "note": "no control needed"}
            sec["design"] = {"note": "no control needed", "designs": []}
        elif core.ctrl is not None:
            sec["controllability"] = core.ctrl.to_dict()
            designs = []
            for d in core.designs:
                pn, qn = d.law.norms()
                designs.append({"gamma1_factor": d.factor, "gamma1": d.gamma1,
                                "method": core.cfg.design.method,
                                "projected_abscissa": d.projected_abscissa,
                                "gain_norm": float(np.linalg.norm(d.Kg)),
                                "p_norms": pn, "q_norms": qn,
                                "closed_loop_abscissa": d.closed.abscissa,
                                "block_residuals": block_structure_residual(core.ops, d.law, core.spec.PN),
                                "closed_loop_eigenvalues": _eig_list(d.closed.eigenvalues)})
            sec["design"] = {"K": core.act.K, "actuator_retries": core.act.retries, "designs": designs}
        cl = core.closed
        sec["closed_loop"] = {"abscissa": cl.abscissa, "gamma0": core.spec.gamma0,
                              "eigenvalues": _eig_list(cl.eigenvalues)}
    return sec


def build_report(state: RunState, timestamp=None):
    cfg = state.cfg
    rep = {
        "schema": "oseenstab.report/1",
        "generated_at": timestamp or datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "provenance": {"config_hash": cfg.digest(), "seed": state.seed, "version": __version__,
                       "numpy": np.__version__, "scipy": scipy.__version__,
                       "python": platform.python_version()},
        "config": cfg.to_dict(),
        "stages": state.stages,
    }
    rep.update(core_sections(state.core))
    s = state.sim
    if s:
        sim = {"T": s["T"], "dt": s["dt"], "T_contraction": s["T_contraction"],
               "linear_fit": _fit_dict(s["linear_fit"])}
        if "real_fit" in s:
            sim["open_loop_fit"] = _fit_dict(s["open_fit"])
            sim["real_fit"] = _fit_dict(s["real_fit"])
            sim["real_channels"] = s["real_law"].n_channels
            sim["real_closed_loop_abscissa"] = s["real_closed"].abscissa
        sim["nonlinear"] = [
            {"amplitude": a, "fit": _fit_dict(s["nonlinear_fit"][a]), "blowup": tr.blowup,
             "truncated": tr.truncated, "div_max": tr.div_max, "trace_error": tr.trace_error,
             "final_ratio": float(tr.l2[-1] / tr.l2[0])}
            for a, tr in s["nonlinear"].items()]
        if "nonlinear_2g1_fit" in s:
            sim["nonlinear_2gamma1_fit"] = _fit_dict(s["nonlinear_2g1_fit"])
        if "basin" in s:
            b = s["basin"]
            sim["basin"] = {"r1_est": b.r1_est, "diagnostic": b.diagnostic, "trace": b.trace}
        rep["simulation"] = sim
        rep["r1_est"] = s["basin"].r1_est if "basin" in s else None
    if state.maxreg:
        rep["maxreg"] = state.maxreg
    enabled = set(cfg.enabled_checks)
    checks = []
    for cid in CHECK_IDS:
        if cid not in enabled:
            checks.append({"id": cid, "status": "disabled", "details": {}})
        elif cid in state.checks:
            checks.append({"id": cid, **state.checks[cid]})
        else:
            checks.append({"id": cid, "status": "not_run", "details": {}})
    rep["checks"] = checks
    failing = [c["id"] for c in checks if c["status"] == "fail"]
    stage_fail = [s_["name"] for s_ in state.stages if s_["status"] == "failed"]
    rep["summary"] = {"passed": not failing and not stage_fail, "failing_checks": failing,
                      "failed_stages": stage_fail}
    # fixed schema: sections a command did not reach are present as null
    return clean({k: rep.get(k) for k in REPORT_SECTIONS})


REPORT_SECTIONS = ("schema", "generated_at", "provenance", "config", "stages", "mesh", "equilibrium",
                   "spectrum", "controllability", "design", "closed_loop", "simulation", "r1_est",
                   "maxreg", "checks", "summary")


def report_json(report) -> str:
    return json.dumps(report, indent=2, ensure_ascii=False) + "\n"


def exit_code(report) -> int:
    return 0 if report["summary"]["passed"] else 1
