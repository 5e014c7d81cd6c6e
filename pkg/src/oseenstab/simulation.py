"""Time integration of the closed-loop linearized and nonlinear dynamics, decay fits and basin search.

States are integrated in the orthonormal solenoidal basis, so every logged
field is discretely divergence free.  The boundary trace of the state is the
feedback ``F z`` on the patch and zero elsewhere.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .feedback import FeedbackLaw, closed_loop_matrix, realify
from .operators import DiscreteOperators, MACGrid
from .stabilizability import collar_operator

log = logging.getLogger(__name__)

BLOWUP_FACTOR = 1e3
CFL_MAX = 0.5
MAX_HALVINGS = 4


@dataclass
class Trajectory:
    times: np.ndarray
    l2: np.ndarray
    lq: np.ndarray | None = None
    besov: np.ndarray | None = None
    nu: np.ndarray | None = None         # (steps, Kb)
    mu: np.ndarray | None = None         # (steps, Ki)
    pressure_norm: np.ndarray | None = None
    states: list = field(default_factory=list)
    state_times: list = field(default_factory=list)
    blowup: bool = False
    truncated: bool = False
    div_max: float = 0.0
    trace_error: float = 0.0
    dt: float = 0.0

    def __len__(self):
        return len(self.times)

    @property
    def final(self):
        return self.l2[-1] if len(self.l2) else np.nan


@dataclass
class DecayFit:
    gamma_fit: float
    C_fit: float
    window: tuple
    r2: float
    beta_T: float
    T: float
    low_confidence: bool = False

    def to_dict(self):
        return {"gamma_fit": self.gamma_fit, "C_fit": self.C_fit, "window": list(self.window),
                "r2": self.r2, "beta_T": self.beta_T, "T": self.T, "low_confidence": self.low_confidence}


@dataclass
class BasinResult:
    r1_est: float
    trace: list
    diagnostic: str = ""


def default_horizon(gamma0, grid: MACGrid | None = None, vmax=0.0):
    T = 10.0 / gamma0
    dt = T / 2000
    if grid is not None and vmax > 0:
        dt = min(dt, CFL_MAX * min(grid.hx, grid.hy) / vmax)
    return T, dt


class _CN:
    """Cached Crank-Nicolson factors for a dense generator."""

    def __init__(self, A):
        self.A = A
        self._cache = {}

    def step_matrices(self, dt):
        if dt not in self._cache:
            I = np.eye(self.A.shape[0])
            self._cache[dt] = (sla.lu_factor(I - 0.5 * dt * self.A), I + 0.5 * dt * self.A)
        return self._cache[dt]


def simulate_linear(AF, w0, T, dt, ops: DiscreteOperators | None = None, law: FeedbackLaw | None = None,
                    norms=None, stride=0):
    """Crank-Nicolson for w' = AF w in reduced coordinates (``w0`` given as a face vector when ``ops``)."""
    if dt > T / 100 + 1e-15:
        raise ValueError(f"dt={dt} exceeds T/100={T / 100}")
    Q = ops.Q if ops is not None else None
    x = Q.T @ w0 if Q is not None else np.array(w0, dtype=AF.dtype)
    lift = (lambda y: Q @ y) if Q is not None else (lambda y: y)
    vol = ops.grid.vol if ops is not None else 1.0
    extra = norms or {}
    nsteps = int(round(T / dt))
    lu, Bp = _CN(AF).step_matrices(dt)
    times = np.arange(nsteps + 1) * dt
    l2 = np.zeros(nsteps + 1)
    others = {k: np.zeros(nsteps + 1) for k in extra}
    Kb = law.p.shape[1] if law is not None else 0
    Ki = law.q.shape[1] if law is not None else 0
    nu = np.zeros((nsteps + 1, Kb), dtype=complex)
    mu = np.zeros((nsteps + 1, Ki), dtype=complex)
    states, stimes = [], []
    for n in range(nsteps + 1):
        if n:
            x = sla.lu_solve(lu, Bp @ x)
        w = lift(x)
        l2[n] = np.sqrt(vol * np.sum(np.abs(w) ** 2)) if ops is not None else np.linalg.norm(x)
        for k, fn in extra.items():
            others[k][n] = fn(w)
        if law is not None:
            nu[n], mu[n] = law.controls(w)
        if stride and n % stride == 0:
            states.append(w.copy())
            stimes.append(times[n])
        if not np.isfinite(l2[n]):
            raise FloatingPointError("non-finite state in linear simulation")
    tr = Trajectory(times, l2, others.get("lq"), others.get("besov"), _maybe_real(nu), _maybe_real(mu),
                    states=states, state_times=stimes, dt=dt)
    return tr


def _maybe_real(a):
    if a is None or a.size == 0:
        return np.real(a) if a is not None else None
    return a.real if np.abs(a.imag).max() <= 1e-12 * max(1.0, np.abs(a).max()) else a


# ---------------------------------------------------------------------------
# nonlinear


def nonlinear_term(ops: DiscreteOperators, z, gb=None):
    """P[(z . grad) z] with ``gb`` the tangential boundary trace of z."""
    return ops.leray.apply(ops.grid.advect(z, z, gb))


def _require_real(law: FeedbackLaw | None):
    if law is None or law.real:
        return law
    return realify(law)


def simulate_nonlinear(ops: DiscreteOperators, law: FeedbackLaw | None, z0, T, dt, norms=None, stride=0,
                       blowup_factor=BLOWUP_FACTOR, pressure=False, record_every=1):
    """IMEX: Crank-Nicolson on the closed-loop generator, AB2 on the convection (Euler start)."""
    grid = ops.grid
    law = _require_real(law)
    if law is None:
        AF = ops.oseen_reduced
    else:
        AF = closed_loop_matrix(ops, law)
    Q = ops.Q
    x = Q.T @ np.asarray(z0, float)
    h = min(grid.hx, grid.hy)
    cn = _CN(AF)
    vol = grid.vol
    extra = norms or {}
    Kb = law.p.shape[1] if law is not None else 0
    Ki = law.q.shape[1] if law is not None else 0
    C = collar_operator(grid) if Ki else None

    def trace(z):
        return law.boundary_values(z) if law is not None and Kb else np.zeros(grid.nb)

    def nonlin(z):
        return Q.T @ grid.advect(z, z, trace(z))

    def l2(z):
        return float(np.sqrt(vol * np.sum(z * z)))

    z = Q @ x
    n0 = l2(z)
    rec = {"t": [], "l2": [], "nu": [], "mu": [], "p": []}
    rec.update({k: [] for k in extra})
    states, stimes = [], []
    N_prev = None
    blowup = truncated = False
    div_max = trace_err = 0.0

    def log_state(t, z, zt):
        nonlocal div_max, trace_err
        rec["t"].append(t)
        rec["l2"].append(l2(z))
        for k, fn in extra.items():
            rec[k].append(fn(z))
        if law is not None:
            nu, mu = law.controls(z)
            rec["nu"].append(nu)
            rec["mu"].append(mu)
            # the trace the convection term sees must be F z on the patch, zero elsewhere
            g = trace(z)
            off = ~grid.mesh.patch_mask()
            trace_err = max(trace_err, float(np.abs(g[off]).max(initial=0.0)))
        if pressure:
            rec["p"].append(_pressure_norm(ops, law, z, zt, C))
        div_max = max(div_max, float(np.abs(grid.div @ z).max()))

    log_state(0.0, z, None)
    nsteps = int(round(T / dt))
    for n in range(1, nsteps + 1):
        Nz = nonlin(z)
        vmax = float(np.abs(z).max())
        sub = 1
        while vmax * dt / sub / h > CFL_MAX and sub < 2 ** MAX_HALVINGS:
            sub *= 2
        if vmax * dt / sub / h > CFL_MAX:
            log.warning("CFL violation persists at t=%.4g; truncating", n * dt)
            truncated = True
            break
        x_old = x
        if sub == 1:
            lu, Bp = cn.step_matrices(dt)
            ab = Nz if N_prev is None else 1.5 * Nz - 0.5 * N_prev
            x = sla.lu_solve(lu, Bp @ x - dt * ab)
            N_prev = Nz
        else:
            # restart with Euler-started sub-steps; history is discarded
            lu, Bp = cn.step_matrices(dt / sub)
            for k in range(sub):
                Nk = Nz if k == 0 else nonlin(Q @ x)
                x = sla.lu_solve(lu, Bp @ x - (dt / sub) * Nk)
            N_prev = None
        z = Q @ x
        if n % record_every == 0 or n == nsteps:
            log_state(n * dt, z, Q @ ((x - x_old) / dt))
        if stride and n % stride == 0:
            states.append(z.copy())
            stimes.append(n * dt)
        nz = l2(z)
        if not np.isfinite(nz) or nz > blowup_factor * max(n0, 1e-300):
            blowup = True
            log.info("blow-up detected at t=%.4g (norm %.3e)", n * dt, nz)
            break
    arr = lambda key: np.array(rec[key]) if rec.get(key) else None
    nu = np.array(rec["nu"]).reshape(len(rec["t"]), Kb) if law is not None else np.zeros((len(rec["t"]), 0))
    mu = np.array(rec["mu"]).reshape(len(rec["t"]), Ki) if law is not None else np.zeros((len(rec["t"]), 0))
    return Trajectory(np.array(rec["t"]), np.array(rec["l2"]), arr("lq"), arr("besov"), nu.real, mu.real,
                      arr("p"), states, stimes, blowup, truncated, div_max, trace_err, dt)


def _pressure_norm(ops, law, z, zt, C):
    if zt is None:
        return np.nan
    chi = recover_pressure(ops, z, zt, law=law, C=C)
    return float(np.sqrt(ops.grid.vol * np.sum(chi ** 2)))


def recover_pressure(ops: DiscreteOperators, z, zt, law: FeedbackLaw | None = None, C=None):
    """Pressure chi with grad chi = (I - P)(nu0 Lap z - L_e z - (z.grad)z - z_t + (m u) tau), zero mean."""
    grid = ops.grid
    g = law.boundary_values(z) if law is not None and law.p.shape[1] else np.zeros(grid.nb)
    g = np.real(g)
    r = -(ops.expr_II @ z + ops.expr_IB @ g) - grid.advect(z, z, g) - zt
    if law is not None and law.q.shape[1]:
        C = collar_operator(grid) if C is None else C
        r = r + C @ np.real(law.collar_amplitudes(z))
    chi = ops.leray.pressure_solve(grid.div @ r)
    return chi - chi.mean()


def steady_pressure(grid: MACGrid, nu0, y, f):
    """Pressure of a steady state: grad pi = (I - P)(f + nu0 Lap y - (y.grad)y), zero mean."""
    from .operators import LerayProjector

    L, _ = grid.laplacian
    r = f + nu0 * (L @ y) - grid.advect(y, y)
    chi = LerayProjector(grid).pressure_solve(grid.div @ r)
    return chi - chi.mean()


# ---------------------------------------------------------------------------
# fits


def fit_decay(times, norms, T=None, window=0.5, min_samples=10) -> DecayFit:
    """Least-squares exponential rate on the tail ``window`` fraction of the series."""
    t = np.asarray(times, float)
    y = np.asarray(norms, float)
    t0 = t[0] + (1.0 - window) * (t[-1] - t[0])
    sel = (t >= t0 - 1e-12) & (y > 0)
    if sel.sum() < min_samples:
        raise ValueError(f"need at least {min_samples} positive samples in the fit window, got {sel.sum()}")
    ts, ly = t[sel], np.log(y[sel])
    A = np.vstack([ts, np.ones_like(ts)]).T
    (slope, icpt), *_ = np.linalg.lstsq(A, ly, rcond=None)
    pred = A @ np.array([slope, icpt])
    ss_res = np.sum((ly - pred) ** 2)
    ss_tot = np.sum((ly - ly.mean()) ** 2)
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    T = (t[-1] - t[0]) if T is None else T
    beta = orbit_contraction(t, y, T)
    monotone = np.all(np.diff(y[sel]) <= 0) or np.all(np.diff(y[sel]) >= 0)
    low = bool(r2 < 0.9 and not monotone)
    return DecayFit(float(-slope), float(np.exp(icpt) / y[0]), (float(ts[0]), float(ts[-1])), float(r2),
                    beta, float(T), low)


def orbit_contraction(times, norms, T):
    """sup_t |z(t+T)| / |z(t)| along the run: a lower bound for the norm of the time-T flow map."""
    t = np.asarray(times, float)
    y = np.asarray(norms, float)
    sel = t + T <= t[-1] + 1e-9
    if not np.any(sel):
        raise ValueError("trajectory shorter than the contraction horizon")
    later = np.interp(t[sel] + T, t, y)
    return float(np.max(later / y[sel]))


def flow_norm(AF, T, vol=1.0):
    """Operator norm of exp(AF T) in the (uniformly weighted) L2 pairing."""
    return float(np.linalg.norm(sla.expm(AF * T), 2))


def contraction_chain(times, norms, T, beta=None, n_max=3):
    """Rows (n, |z(nT)|, beta^n |z0|); ``beta`` defaults to the orbit contraction factor."""
    t = np.asarray(times)
    y = np.asarray(norms)
    beta = orbit_contraction(t, y, T) if beta is None else beta
    rows = []
    for n in range(n_max + 1):
        if t[0] + n * T > t[-1] + 1e-9:
            break
        rows.append((n, float(np.interp(t[0] + n * T, t, y)), float(beta ** n * y[0])))
    return float(beta), rows


def basin_search(ops, law, probe, T, dt, a_lo=1e-4, a_hi=1.0, n_bisect=8, blowup_factor=BLOWUP_FACTOR):
    """Bisection (in log amplitude) for the largest amplitude whose run contracts over T."""
    probe = np.asarray(probe, float)
    probe = probe / np.sqrt(ops.grid.vol * np.sum(probe ** 2))
    trace = []

    def accept(a):
        tr = simulate_nonlinear(ops, law, a * probe, T, dt, blowup_factor=blowup_factor, record_every=50)
        beta = tr.l2[-1] / tr.l2[0]
        ok = bool((not tr.blowup) and (not tr.truncated) and tr.times[-1] >= T - 1e-9 and beta < 1)
        trace.append({"amplitude": float(a), "beta_T": float(beta), "blowup": bool(tr.blowup), "accepted": ok})
        return ok

    if not accept(a_lo):
        return BasinResult(0.0, trace, "smallest probe amplitude already fails to contract")
    if accept(a_hi):
        return BasinResult(float(a_hi), trace, "upper bracket accepted; r1_est is a lower bound")
    lo, hi = a_lo, a_hi
    for _ in range(n_bisect):
        mid = np.sqrt(lo * hi)
        if accept(mid):
            lo = mid
        else:
            hi = mid
    return BasinResult(float(lo), trace, "")
