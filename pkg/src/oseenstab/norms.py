"""Discrete L^q, second-order Sobolev and interpolation (Besov surrogate) norms, and the
empirical maximal-regularity constant of a stable generator."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
import scipy.linalg as sla
from scipy.integrate import trapezoid

from .operators import DiscreteOperators, MACGrid


class GateError(ValueError):
    pass


def index_gate(q, p, d):
    """Raise if (q, p) leave the regime q > d, 1 < p < 2q/(2q-1)."""
    if not q > d:
        raise GateError(f"q > d violated (q={q}, d={d})")
    if not p > 1:
        raise GateError(f"p > 1 violated (p={p})")
    bound = 2 * q / (2 * q - 1)
    if not p < bound:
        frac = Fraction(bound).limit_denominator(1000)
        raise GateError(f"p < 2q/(2q-1) violated (p={p}, 2q/(2q-1)={frac}={bound:.6g})")


@dataclass
class NormSuite:
    q: float = 4.0
    p: float = 9 / 8
    d: int = 2
    h: float = 1 / 16
    n_t: int = 32
    gate: bool = True        # False only for diagnostics outside the tight-index regime
    t_grid: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.gate:
            index_gate(self.q, self.p, self.d)
        self.t_grid = np.geomspace(self.h ** 2, 1.0, self.n_t)

    @property
    def qprime(self):
        return self.q / (self.q - 1)

    @property
    def theta(self):
        return 1.0 - 1.0 / self.p


def lq_norm(f, q, vol=1.0, vector=None):
    """(sum_cells |f|^q vol)^(1/q), |.| the Euclidean magnitude over the leading component axis.

    ``f`` is a scalar cell array or, when ``vector`` (default: ``f.ndim >= 3``),
    an array of shape (d, *cells).
    """
    f = np.asarray(f)
    if vector is None:
        vector = f.ndim >= 3
    mag = np.sqrt(np.sum(np.abs(f) ** 2, axis=0)) if vector else np.abs(f)
    if np.isinf(q):
        return float(mag.max(initial=0.0))
    return float((np.sum(mag ** q) * vol) ** (1.0 / q))


def field_lq(grid: MACGrid, z, q):
    return lq_norm(grid.to_cells(z), q, grid.vol)


def second_difference(grid: MACGrid, z):
    L, _ = grid.laplacian
    return L @ z


def w2q_norm(grid: MACGrid, z, q):
    """Surrogate W^{2,q} norm: |z|_q + |Lap_h z|_q on cells."""
    return field_lq(grid, z, q) + field_lq(grid, second_difference(grid, z), q)


def w1q_norm(grid: MACGrid, z, q):
    """Surrogate W^{1,q} norm from one-sided face differences."""
    Uf, Vf = grid.full(np.asarray(z))
    du = [np.diff(Uf, axis=0) / grid.hx, np.diff(Uf, axis=1) / grid.hy]
    dv = [np.diff(Vf, axis=0) / grid.hx, np.diff(Vf, axis=1) / grid.hy]
    grad = sum((np.sum(np.abs(a) ** q) * grid.vol) for a in du + dv) ** (1.0 / q)
    return field_lq(grid, z, q) + float(grad)


class StokesBasis:
    """Eigendecomposition of the discrete Stokes operator in the solenoidal basis."""

    def __init__(self, ops: DiscreteOperators):
        self.ops = ops
        mu, V = sla.eigh(ops.stokes_reduced)
        self.mu = mu
        self.V = V
        self._QV = None

    @property
    def QV(self):
        if self._QV is None:
            self._QV = self.ops.Q @ self.V
        return self._QV

    def coefficients(self, z):
        return self.V.T @ (self.ops.Q.T @ z)


def besov_surrogate(z, suite: NormSuite, stokes: StokesBasis):
    """Real-interpolation norm between L^q and W^{2,q} by spectral K-functional splitting.

    K(t, z) = |z_high|_{L^q} + t |z_low|_{W^{2,q}} with z_low the Stokes modes
    of eigenvalue <= 1/t; the norm is (sum_j (t_j^-theta K(t_j))^p dlog t_j)^(1/p).
    """
    if stokes is None:
        raise ValueError("besov surrogate needs the Stokes eigendecomposition")
    ops = stokes.ops
    grid = ops.grid
    z = np.asarray(z)
    c = stokes.coefficients(z)
    t = suite.t_grid
    dlog = np.gradient(np.log(t))
    K = np.zeros_like(t)
    sv = np.sqrt(grid.vol)
    if suite.q == 2:
        for j, tj in enumerate(t):
            low = stokes.mu <= 1.0 / tj
            hi_n = sv * np.linalg.norm(c[~low])
            lo_n = sv * (np.linalg.norm(c[low]) + np.linalg.norm(stokes.mu[low] * c[low]))
            K[j] = hi_n + tj * lo_n
    else:
        # partial sums of the mode expansion at each cutoff
        cuts = np.searchsorted(stokes.mu, 1.0 / t, side="right")
        contrib = stokes.QV * c[None, :]
        csum = np.cumsum(contrib, axis=1)
        for j, tj in enumerate(t):
            k = cuts[j]
            z_low = csum[:, k - 1] if k > 0 else np.zeros_like(z)
            K[j] = field_lq(grid, z - z_low, suite.q) + tj * w2q_norm(grid, z_low, suite.q)
    return float((np.sum((t ** -suite.theta * K) ** suite.p * dlog)) ** (1.0 / suite.p))


# ---------------------------------------------------------------------------
# maximal regularity


def time_lp(values, times, p):
    """Composite trapezoid L^p(0, T) norm of a sampled nonnegative scalar series."""
    v = np.asarray(values, float) ** p
    return float(trapezoid(v, times) ** (1.0 / p))


def band_limited_forcing(rng, shapes, T, n_freq=4):
    """Random f(t) = sum_m (a_m cos + b_m sin)(2 pi m t / T) spatial patterns."""
    basis = np.column_stack(shapes) if isinstance(shapes, list) else shapes
    k = basis.shape[1]
    A = rng.standard_normal((n_freq, k))
    B = rng.standard_normal((n_freq, k))
    m = np.arange(1, n_freq + 1)

    def f(t):
        w = 2 * np.pi * m * t / T
        return basis @ (np.cos(w) @ A + np.sin(w) @ B)
    return f


def maxreg_constant(AF, suite: NormSuite, n_samples=20, T=1.0, dt=None, rng=None, spatial_norm=None,
                    patterns=None, n_patterns=6, return_all=False):
    """Empirical sup of (|eta'| + |AF eta|) / |f| in L^p(0,T; L^q), eta' = AF eta + f, eta(0)=0.

    ``spatial_norm`` maps a coordinate vector to its spatial norm (default the
    Euclidean norm, i.e. L2 for an orthonormal basis).  ``patterns`` are the
    spatial forcing shapes in the same coordinates.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    AF = np.asarray(AF)
    r = AF.shape[0]
    dt = T / 400 if dt is None else dt
    nsteps = int(round(T / dt))
    times = np.arange(nsteps + 1) * dt
    norm = spatial_norm or (lambda x: float(np.linalg.norm(x)))
    if patterns is None:
        patterns = rng.standard_normal((r, min(n_patterns, r)))
    I = np.eye(r)
    lu = sla.lu_factor(I - 0.5 * dt * AF)
    Bp = I + 0.5 * dt * AF
    ratios = []
    for _ in range(n_samples):
        f = band_limited_forcing(rng, patterns, T)
        fs = np.array([f(t) for t in times])
        if not np.any(fs):
            continue
        eta = np.zeros(r, dtype=AF.dtype)
        n_eta_t, n_Aeta, n_f = [], [], []
        for n, t in enumerate(times):
            if n:
                eta = sla.lu_solve(lu, Bp @ eta + 0.5 * dt * (fs[n] + fs[n - 1]))
            Ae = AF @ eta
            n_Aeta.append(norm(Ae))
            n_eta_t.append(norm(Ae + fs[n]))
            n_f.append(norm(fs[n]))
        den = time_lp(n_f, times, suite.p)
        if den == 0:
            continue
        ratios.append((time_lp(n_eta_t, times, suite.p) + time_lp(n_Aeta, times, suite.p)) / den)
    C = float(max(ratios)) if ratios else float("nan")
    return (C, ratios) if return_all else C


def smooth_patterns(ops: DiscreteOperators, rng, k=6, n_modes=3):
    """Mesh-independent smooth solenoidal forcing shapes in reduced coordinates."""
    from .operators import random_stream

    grid = ops.grid
    out = []
    for _ in range(k):
        s = random_stream(grid, rng, n_modes=n_modes, clamp=False)
        out.append(ops.Q.T @ grid.stream_to_velocity(s))
    return np.column_stack(out)


def nonlinearity_constant(ops: DiscreteOperators, q=4.0, n_samples=50, rng=None):
    """max |P (z.grad) z|_{L^q} / |z|^2_{W^{1,q}} over random smooth zero-trace fields."""
    from .operators import random_solenoidal

    rng = np.random.default_rng(0) if rng is None else rng
    grid = ops.grid
    best = 0.0
    for _ in range(n_samples):
        z = random_solenoidal(grid, rng, scale=1.0)
        nz = ops.leray.apply(grid.advect(z, z))
        best = max(best, field_lq(grid, nz, q) / w1q_norm(grid, z, q) ** 2)
    return best
