"""Acceptance checks evaluated at the end of a run.

Each check returns a status (pass, fail or skipped when vacuous, e.g. no
unstable modes) plus the measured quantities that decided it.
"""

from __future__ import annotations

import json
import logging

import numpy as np

from .config import CHECK_IDS, ConfigError, parse_config
from .mesh import setup_mesh
from .norms import NormSuite, field_lq, maxreg_constant, smooth_patterns
from .operators import (MACGrid, adjoint_identity_terms, assemble_dirichlet_map, assemble_oseen,
                        manufactured_field, random_boundary_data, random_solenoidal, tangential_trace)
from .simulation import contraction_chain, flow_norm
from .stabilizability import ucp_counterexample_check
from .feedback import spectra_match

log = logging.getLogger(__name__)

ADJOINT_TOL = 0.05
ADJOINT_RATIO = 1.5
TANGENTIAL_ORDER = 1.0
UCP_TOL = 1e-12
PLACEMENT_TOL = 1e-6
FIT_REL = 0.10
LIMIT_REL = 0.05
CHAIN_SLACK = 1.1
BASIN_SLACK = 0.10
REAL_SPEC_TOL = 1e-7
REAL_RATE_REL = 0.05
MAXREG_SPREAD = 2.0


class Missing(RuntimeError):
    pass


def _need(state, *stages):
    for s in stages:
        if not state.ok(s):
            raise Missing(f"requires stage '{s}', which did not complete")


def _result(passed, **details):
    return {"status": "pass" if passed else "fail", "details": details}


def _skipped(reason, **details):
    return {"status": "skipped", "details": {"reason": reason, **details}}


def _unstable_ye(cfg, grid):
    ph = cfg.physics
    if ph.equilibrium == "manufactured":
        return manufactured_field(grid, ph.amplitude, ph.profile)
    return manufactured_field(grid, 2.0, "shear-cell")


# ---------------------------------------------------------------------------


def check_projection(state, rng):
    _need(state, "spectrum")
    ops = state.core.ops
    g = ops.grid
    P = ops.leray.matrix()
    idem = float(np.linalg.norm(P @ P - P, "fro"))
    worst = 0.0
    for _ in range(20):
        phi = rng.standard_normal(g.ncell)
        gp = g.grad @ phi
        worst = max(worst, float(np.linalg.norm(ops.leray.apply(gp)) / np.linalg.norm(gp)))
    return _result(idem <= 1e-10 and worst <= 1e-10, idempotency_fro=idem, gradient_leak_max=worst)


def check_adjoint(state, rng):
    cfg = state.cfg
    v = cfg.verify
    seed = int(rng.integers(2 ** 62))
    out = {}
    passed = True
    for label in ("zero", "unstable"):
        pooled, worst, median = [], [], []
        for n in v.adjoint_dims:
            mesh = setup_mesh((n, n), cfg.mesh.lengths, cfg.mesh.patch_side, cfg.mesh.patch_fraction,
                              cfg.mesh.collar_depth)
            g = MACGrid(mesh)
            ye = np.zeros(g.n) if label == "zero" else _unstable_ye(cfg, g)
            ops = assemble_oseen(g, cfg.physics.nu0, ye)
            assemble_dirichlet_map(ops)
            r = np.random.default_rng(seed)
            terms = np.array([adjoint_identity_terms(ops, random_solenoidal(g, r), random_boundary_data(g, r))
                              for _ in range(v.samples)])
            err = np.abs(terms[:, 0] - terms[:, 1])
            ref = np.abs(terms[:, 1])
            rel = err / (ref + np.finfo(float).eps)
            # pooled over the batch: a single pair with a near-orthogonal pairing cannot dominate
            pooled.append(float(err.sum() / ref.sum()))
            worst.append(float(rel.max()))
            median.append(float(np.median(rel)))
        ratio = pooled[0] / pooled[1] if pooled[1] > 0 else np.inf
        ok = pooled[0] <= ADJOINT_TOL and ratio >= ADJOINT_RATIO
        passed &= ok
        out[label] = {"dims": list(v.adjoint_dims), "pooled_residual": pooled, "ratio": ratio,
                      "max_pair_residual": worst, "median_pair_residual": median, "passed": ok}
    return _result(passed, **out)


def check_tangentiality(state, rng):
    cfg = state.cfg
    v = cfg.verify
    seed = int(rng.integers(2 ** 62))
    hs, errs = [], []
    for n in v.tangential_dims:
        mesh = setup_mesh((n, n), cfg.mesh.lengths, cfg.mesh.patch_side, cfg.mesh.patch_fraction,
                          cfg.mesh.collar_depth)
        g = MACGrid(mesh)
        r = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(v.samples):
            _, nrm = tangential_trace(g, random_solenoidal(g, r))
            worst = max(worst, float(np.abs(nrm).max()))
        hs.append(g.hx)
        errs.append(worst)
    order = float(np.polyfit(np.log(hs), np.log(errs), 1)[0])
    return _result(order >= TANGENTIAL_ORDER, dims=list(v.tangential_dims), normal_component_max=errs,
                   order=order)


def check_counterexample(state, rng):
    _need(state, "mesh")
    rows = [ucp_counterexample_check(state.core.mesh, a) for a in (1.0, 2.0)]
    ok = all(r["interior_residual"] <= UCP_TOL and r["cauchy_data"] <= UCP_TOL and r["divergence"] <= UCP_TOL
             for r in rows)
    return _result(ok, cases=rows)


def check_rank(state, rng):
    _need(state, "design")
    core = state.core
    if not core.needs_control:
        return _skipped("no unstable eigenvalues; no control needed")
    rep = core.ctrl
    return _result(rep.passed, svd_tol=rep.svd_tol, boundary_only_passed=rep.boundary_only_passed,
                   ranks=[e.rank for e in rep.entries], ell=[e.ell for e in rep.entries],
                   boundary_ranks=[e.boundary_rank for e in rep.entries])


def check_placement(state, rng):
    _need(state, "design")
    core = state.core
    if not core.needs_control:
        return _skipped("no unstable eigenvalues; no control needed")
    rows = [{"gamma1": d.gamma1, "factor": d.factor, "projected_abscissa": d.projected_abscissa,
             "passed": d.projected_abscissa <= -d.gamma1 + PLACEMENT_TOL} for d in core.designs]
    return _result(all(r["passed"] for r in rows), designs=rows)


def check_closed_loop(state, rng):
    _need(state, "design", "simulate")
    core = state.core
    a = core.closed.abscissa
    g0 = core.spec.gamma0
    fit = state.sim["linear_fit"].gamma_fit
    rel = abs(fit - abs(a)) / abs(a)
    return _result(a <= -g0 and rel <= FIT_REL, abscissa=a, gamma0=g0, fitted_rate=fit, relative_error=rel)


def check_nonlinear(state, rng):
    _need(state, "simulate")
    core, sim, cfg = state.core, state.sim, state.cfg
    amps = cfg.sim.amplitudes
    amp = amps[0]
    tr = sim["nonlinear"][amp]
    fit = sim["nonlinear_fit"][amp]
    if fit is None:
        return _result(False, amplitude=amp, reason="no decay fit (blow-up or too few samples)")
    Tc = sim["T_contraction"]
    beta_orbit, rows_orbit = contraction_chain(tr.times, tr.l2, Tc)
    AF = sim["real_closed"].AF if "real_closed" in sim else core.closed.AF.real
    beta_flow, rows_flow = contraction_chain(tr.times, tr.l2, Tc, beta=flow_norm(AF, Tc))
    chain_ok = all(r[1] <= CHAIN_SLACK * r[2] for r in rows_orbit + rows_flow) and len(rows_orbit) == 4
    a = abs(core.closed.abscissa)
    small = min(amps)
    fit_small = sim["nonlinear_fit"][small]
    limit_rel = abs(fit_small.gamma_fit - a) / a if fit_small is not None else np.inf
    passed = fit.gamma_fit > 0 and chain_ok and limit_rel <= LIMIT_REL and not tr.blowup
    return _result(passed, amplitude=amp, gamma_fit=fit.gamma_fit, T=Tc,
                   beta_orbit=beta_orbit, chain_orbit=rows_orbit, beta_flow=beta_flow, chain_flow=rows_flow,
                   small_amplitude=small, small_amplitude_rate=fit_small.gamma_fit if fit_small else None,
                   linear_rate=a, limit_relative_error=limit_rel)


def check_basin(state, rng):
    _need(state, "simulate")
    if not state.core.needs_control:
        return _skipped("no unstable eigenvalues; no gamma1 to vary")
    f1 = state.sim["nonlinear_fit"][state.cfg.sim.amplitudes[0]]
    f2 = state.sim.get("nonlinear_2g1_fit")
    if f1 is None or f2 is None:
        return _result(False, reason="missing nonlinear fit")
    g1, g2 = f1.gamma_fit, f2.gamma_fit
    return _result(g2 >= g1 - BASIN_SLACK * abs(g1), gamma_fit_g1=g1, gamma_fit_2g1=g2)


def check_realification(state, rng):
    _need(state, "simulate")
    core, sim = state.core, state.sim
    if not core.needs_control:
        return _skipped("no unstable eigenvalues; no feedback to realify")
    dist = spectra_match(core.closed.eigenvalues, sim["real_closed"].eigenvalues)
    gc, gr = sim["linear_fit"].gamma_fit, sim["real_fit"].gamma_fit
    rel = abs(gr - gc) / abs(gc)
    return _result(dist <= REAL_SPEC_TOL and rel <= REAL_RATE_REL, spectrum_distance=dist,
                   real_channels=sim["real_law"].n_channels, complex_rate=gc, real_rate=gr,
                   relative_error=rel)


def maxreg_on(core, cfg, rng):
    s = cfg.sim
    ops = core.ops
    g = ops.grid
    suite = NormSuite(cfg.norms.q, cfg.norms.p, 2, h=g.hx, n_t=cfg.norms.n_t)
    pats = smooth_patterns(ops, rng)
    AF = core.closed.AF.real
    Q = ops.Q
    return maxreg_constant(AF, suite, n_samples=s.maxreg_samples, T=s.maxreg_T, dt=s.maxreg_dt, rng=rng,
                           spatial_norm=lambda x: field_lq(g, Q @ x, suite.q), patterns=pats)


def check_maxreg(state, rng):
    from .pipeline import build_core

    _need(state, "design")
    cfg = state.cfg
    seed = int(rng.integers(2 ** 62))
    consts = []
    for n in cfg.verify.maxreg_dims:
        dims = (n, n)
        core = state.core if tuple(state.core.dims) == dims else build_core(
            cfg, dims, rng=np.random.default_rng(seed))
        consts.append(maxreg_on(core, cfg, np.random.default_rng(seed)))
    state.maxreg = {"dims": list(cfg.verify.maxreg_dims), "constants": consts,
                    "samples": cfg.sim.maxreg_samples, "q": cfg.norms.q, "p": cfg.norms.p}
    finite = all(np.isfinite(consts))
    spread = max(consts) / min(consts) if finite and min(consts) > 0 else np.inf
    return _result(finite and spread <= MAXREG_SPREAD, constants=consts, spread=spread)


GATE_OK = "[physics]\nnu0 = 0.01\n[mesh]\nd = 2\ndims = 16\n[norms]\nq = 4\np = \"9/8\"\n"
GATE_BAD = "[physics]\nnu0 = 0.01\n[mesh]\nd = 2\ndims = 16\n[norms]\nq = 4\np = 1.2\n"


def check_gate(state, rng):
    accepted = True
    try:
        parse_config(GATE_OK)
    except ConfigError as exc:
        accepted = False
        log.error("gate rejected a valid config: %s", exc)
    message = ""
    try:
        parse_config(GATE_BAD)
        rejected = False
    except ConfigError as exc:
        message = str(exc)
        rejected = "p < 2q/(2q-1) violated" in message
    return _result(accepted and rejected, accepted_q4_p9_8=accepted, rejected_q4_p1_2=rejected,
                   message=message)


def check_determinism(state, rng):
    from .pipeline import build_design_stage, build_equilibrium_stage, build_mesh_stage, \
        build_spectrum_stage, clean, core_sections, stage_rngs, Core

    _need(state, "design")
    replay = Core(state.cfg, state.core.dims)
    build_mesh_stage(replay)
    build_equilibrium_stage(replay)
    build_spectrum_stage(replay)
    build_design_stage(replay, stage_rngs(state.seed)["design"])
    a = json.dumps(clean(core_sections(state.core)))
    b = json.dumps(clean(core_sections(replay)))
    return _result(a == b, replayed_sections=sorted(core_sections(replay)), identical=a == b)


CHECKS = {
    "AC01-projection": check_projection,
    "AC02-adjoint-identity": check_adjoint,
    "AC03-tangentiality": check_tangentiality,
    "AC04-counterexample": check_counterexample,
    "AC05-kalman-rank": check_rank,
    "AC06-projected-placement": check_placement,
    "AC07-closed-loop": check_closed_loop,
    "AC08-nonlinear-decay": check_nonlinear,
    "AC09-basin-monotone": check_basin,
    "AC10-realification": check_realification,
    "AC11-maxreg": check_maxreg,
    "AC12-index-gate": check_gate,
    "AC13-determinism": check_determinism,
}
assert tuple(CHECKS) == CHECK_IDS


def evaluate_checks(state, rng):
    """Run every enabled check; each gets its own child stream so disabling one leaves the rest unchanged."""
    children = rng.spawn(len(CHECK_IDS))
    enabled = set(state.cfg.enabled_checks)
    for cid, child in zip(CHECK_IDS, children):
        if cid not in enabled:
            continue
        try:
            state.checks[cid] = CHECKS[cid](state, child)
        except Exception as exc:
            log.error("check %s errored: %s", cid, exc)
            state.checks[cid] = {"status": "fail", "details": {"error": f"{type(exc).__name__}: {exc}"}}
        log.info("%s %s", cid, state.checks[cid]["status"])
