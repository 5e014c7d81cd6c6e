"""Finite-dimensional feedback synthesis on the unstable subspace and the closed-loop generator."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.optimize import linear_sum_assignment
from scipy.signal import place_poles

from .operators import DiscreteOperators
from .spectral import SpectralData
from .stabilizability import ActuatorSet, collar_operator

log = logging.getLogger(__name__)

GRAM_COND_MAX = 1e10


class DesignError(RuntimeError):
    pass


@dataclass
class ProjectedSystem:
    Lam: np.ndarray      # (N, N)
    Bv: np.ndarray       # (N, K)
    Bu: np.ndarray       # (N, K)
    bv: np.ndarray       # (n, K) full-space boundary input directions, -(A - k) D f_k
    bu: np.ndarray       # (n, K) full-space collar input directions, P((m u_k) tau)
    eigenvalues: np.ndarray

    @property
    def B(self):
        return np.hstack([self.Bv, self.Bu])

    @property
    def N(self):
        return self.Lam.shape[0]

    def hautus_ranks(self, svd_tol=1e-8):
        out = []
        for lam in self.eigenvalues:
            M = np.hstack([lam * np.eye(self.N) - self.Lam, self.B])
            s = np.linalg.svd(M, compute_uv=False)
            out.append(int(np.sum(s > svd_tol * s[0])) if s.size and s[0] > 0 else 0)
        return out

    @property
    def controllable(self):
        return all(r == self.N for r in self.hautus_ranks())


def build_projected_system(spec: SpectralData, ops: DiscreteOperators, act: ActuatorSet) -> ProjectedSystem:
    grid = ops.grid
    N = spec.N
    if N == 0:
        z = np.zeros((0, 0))
        return ProjectedSystem(z, np.zeros((0, act.K)), np.zeros((0, act.K)),
                               np.zeros((grid.n, act.K)), np.zeros((grid.n, act.K)), np.zeros(0))
    Phi, Phs = spec.phi[:, :N], spec.phi_adj[:, :N]
    gram = grid.vol * Phs.conj().T @ Phi
    if np.linalg.cond(gram) > GRAM_COND_MAX:
        raise DesignError("biorthogonal basis is ill-conditioned")
    APhi = np.column_stack([ops.oseen_apply(Phi[:, b]) for b in range(N)])
    Lam = grid.vol * Phs.conj().T @ APhi
    # boundary inputs enter as -(A - k) D f = -P (A_IB f)
    bv = -np.column_stack([ops.leray.apply(ops.expr_IB @ act.f[:, k]) for k in range(act.K)]) \
        if act.K else np.zeros((grid.n, 0))
    C = collar_operator(grid)
    bu = np.column_stack([ops.leray.apply(C @ act.u[:, k]) for k in range(act.K)]) \
        if act.K else np.zeros((grid.n, 0))
    Bv = grid.vol * Phs.conj().T @ bv
    Bu = grid.vol * Phs.conj().T @ bu
    return ProjectedSystem(Lam, Bv, Bu, bv, bu, spec.eigenvalues[:N].copy())


def dirichlet_input_coords(spec: SpectralData, ops: DiscreteOperators, f):
    """Bv by the route -(Lam - k) <D f_k, phi*_a>, using the assembled Dirichlet map."""
    N = spec.N
    Phs = spec.phi_adj[:, :N]
    c = ops.grid.vol * Phs.conj().T @ (ops.Dmap @ f)
    Lam = np.diag(spec.eigenvalues[:N])
    return -(Lam - ops.k_shift * np.eye(N)) @ c


def abscissa(M) -> float:
    if M.size == 0:
        return -np.inf
    return float(np.max(sla.eigvals(M).real))


def _conjugate_pairing(lam, tol=1e-9):
    """Permutation-free real basis change c = S r for a conjugate-closed eigenvalue list."""
    N = len(lam)
    S = np.zeros((N, N), dtype=complex)
    used = np.zeros(N, dtype=bool)
    col = 0
    for a in range(N):
        if used[a]:
            continue
        if abs(lam[a].imag) <= tol * max(1, abs(lam[a])):
            S[a, col] = 1.0
            used[a] = True
            col += 1
            continue
        d = np.abs(lam - lam[a].conj())
        d[used] = np.inf
        d[a] = np.inf
        b = int(np.argmin(d))
        if d[b] > 1e-6 * max(1, abs(lam[a])):
            return None
        S[a, col], S[a, col + 1] = 1.0, 1j
        S[b, col], S[b, col + 1] = 1.0, -1j
        used[a] = used[b] = True
        col += 2
    return S


def design_gains(psys: ProjectedSystem, gamma1, method="shifted-lqr", spread=None):
    """Gain matrix Kg (2K x N) such that Lam - B Kg has abscissa <= -gamma1."""
    N = psys.N
    B = psys.B
    if N == 0:
        return np.zeros((B.shape[1], 0))
    if not np.any(np.abs(B) > 0) or not psys.controllable:
        raise DesignError("projected pair (Lam, B) is uncontrollable")
    A = psys.Lam + gamma1 * np.eye(N)
    Kg = None
    if method == "shifted-lqr":
        try:
            X = sla.solve_continuous_are(A, B, np.eye(N), np.eye(B.shape[1]))
            Kg = B.conj().T @ X
        except (np.linalg.LinAlgError, ValueError) as exc:
            log.warning("ARE solve failed (%s); falling back to pole placement", exc)
            method = "place"
    if Kg is None and method == "place":
        Kg = _place(psys, gamma1, spread)
    if Kg is None:
        raise ValueError(f"unknown design method {method!r}")
    achieved = abscissa(psys.Lam - B @ Kg)
    if achieved > -gamma1 + 1e-6:
        if method != "place":
            log.warning("LQR abscissa %.3e misses target; trying placement", achieved)
            Kg = _place(psys, gamma1, spread)
            achieved = abscissa(psys.Lam - B @ Kg)
        if achieved > -gamma1 + 1e-6:
            raise DesignError(f"design abscissa {achieved:.6g} > -gamma1 = {-gamma1:.6g}")
    return Kg


def _place(psys, gamma1, spread=None):
    N = psys.N
    S = _conjugate_pairing(psys.eigenvalues)
    if S is None:
        raise DesignError("pole placement needs a conjugate-closed unstable spectrum")
    Si = np.linalg.inv(S)
    Ar = Si @ psys.Lam @ S
    Br = Si @ psys.B
    if np.abs(Ar.imag).max() > 1e-8 * max(1, np.abs(Ar).max()) or np.abs(Br.imag).max() > 1e-8 * max(
            1, np.abs(Br).max()):
        raise DesignError("projected system has no real form for placement")
    spread = 0.1 * gamma1 if spread is None else spread
    poles = -gamma1 - spread * (1 + np.arange(N))
    try:
        res = place_poles(Ar.real, Br.real, poles)
    except Exception as exc:  # scipy raises ValueError for several rank issues
        raise DesignError(f"pole placement failed: {exc}") from exc
    return res.gain_matrix @ Si


@dataclass
class FeedbackLaw:
    f: np.ndarray        # (nb, Kb) boundary actuators
    u: np.ndarray        # (ncell, Ki) collar actuators
    p: np.ndarray        # (n, Kb) boundary functionals
    q: np.ndarray        # (n, Ki) collar functionals
    bv: np.ndarray       # (n, Kb) input directions
    bu: np.ndarray       # (n, Ki)
    vol: float
    gamma1: float = 0.0
    Kg: np.ndarray | None = None
    real: bool = False

    @property
    def n_channels(self):
        return self.p.shape[1] + self.q.shape[1]

    def controls(self, w):
        """(nu, mu): boundary and collar control amplitudes for state w."""
        return self.vol * self.p.conj().T @ w, self.vol * self.q.conj().T @ w

    def boundary_values(self, w):
        """F w: tangential amplitudes on the boundary nodes."""
        nu, _ = self.controls(w)
        return self.f @ nu

    def collar_amplitudes(self, w):
        _, mu = self.controls(w)
        return self.u @ mu

    def input_matrix(self):
        return np.hstack([self.bv, self.bu])

    def functional_matrix(self):
        return np.hstack([self.p, self.q])

    def norms(self):
        v = self.vol
        return ([float(np.sqrt(v) * np.linalg.norm(self.p[:, k])) for k in range(self.p.shape[1])],
                [float(np.sqrt(v) * np.linalg.norm(self.q[:, k])) for k in range(self.q.shape[1])])


def empty_law(ops: DiscreteOperators) -> FeedbackLaw:
    g = ops.grid
    z = np.zeros((g.n, 0))
    return FeedbackLaw(np.zeros((g.nb, 0)), np.zeros((g.ncell, 0)), z, z, z, z, g.vol)


def lift_gains(psys: ProjectedSystem, Kg, spec: SpectralData, act: ActuatorSet, gamma1=0.0) -> FeedbackLaw:
    """Full-space functionals p_k, q_k reproducing -Kg on the biorthogonal coordinates."""
    N, K = spec.N, act.K
    Phs = spec.phi_adj[:, :N]
    P = -Phs @ Kg.conj().T           # columns p_1..p_K, q_1..q_K
    return FeedbackLaw(act.f, act.u, P[:, :K], P[:, K:], psys.bv, psys.bu, spec.vol, gamma1, Kg)


@dataclass
class ClosedLoop:
    AF: np.ndarray          # reduced closed-loop generator
    eigenvalues: np.ndarray
    abscissa: float


def closed_loop_matrix(ops: DiscreteOperators, law: FeedbackLaw) -> np.ndarray:
    """AF = A + sum_k b_k <., p_k> in the solenoidal basis."""
    Q = ops.Q
    A = ops.oseen_reduced
    if law.n_channels == 0:
        return A.astype(complex) if not law.real else A
    Bq = Q.T @ law.input_matrix()
    Pq = law.vol * law.functional_matrix().conj().T @ Q
    AF = A + Bq @ Pq
    return AF.real if law.real else AF


def closed_loop_via_dirichlet(ops: DiscreteOperators, law: FeedbackLaw) -> np.ndarray:
    """AF = A (I - D F) + k D F + G assembled with the Dirichlet map (cross-check form)."""
    Q = ops.Q
    A = ops.oseen_reduced
    F = law.vol * law.f @ law.p.conj().T @ Q            # (nb, r)
    DF = Q.T @ (ops.Dmap @ F)                           # solenoidal, reduced
    C = collar_operator(ops.grid)
    Gm = Q.T @ ops.leray.apply(C @ (law.vol * law.u @ law.q.conj().T @ Q)) \
        if law.q.shape[1] else 0.0
    return A @ (np.eye(A.shape[0]) - DF) + ops.k_shift * DF + Gm


def assemble_closed_loop(ops: DiscreteOperators, law: FeedbackLaw, gamma0=None) -> ClosedLoop:
    AF = closed_loop_matrix(ops, law)
    lam = sla.eigvals(AF)
    lam = lam[np.argsort(-lam.real)]
    a = float(lam[0].real)
    if gamma0 is not None and a > -gamma0:
        log.warning("closed-loop abscissa %.4g exceeds -gamma0 = %.4g", a, -gamma0)
    return ClosedLoop(AF, lam, a)


def realify(law: FeedbackLaw, tol=1e-12) -> FeedbackLaw:
    """Real channels (Re f, Re p), (Im f, Im p) for boundary and collar; zero channels dropped."""

    def split(act, fun, b):
        acts, funs, bs = [], [], []
        for k in range(act.shape[1]):
            for part in (np.real, np.imag):
                a, p, bb = part(act[:, k]), part(fun[:, k]), part(b[:, k])
                if np.abs(a).max(initial=0) > tol and np.abs(p).max(initial=0) > tol:
                    acts.append(a)
                    funs.append(p)
                    bs.append(bb)
        n, m = fun.shape[0], act.shape[0]
        stack = lambda xs, rows: np.column_stack(xs) if xs else np.zeros((rows, 0))
        return stack(acts, m), stack(funs, n), stack(bs, n)

    f, p, bv = split(law.f, law.p, law.bv)
    u, q, bu = split(law.u, law.q, law.bu)
    return FeedbackLaw(f, u, p, q, bv, bu, law.vol, law.gamma1, None, real=True)


def spectra_match(a, b) -> float:
    """Largest distance under an optimal one-to-one matching of two eigenvalue sets."""
    a, b = np.asarray(a), np.asarray(b)
    if len(a) != len(b):
        return np.inf
    if len(a) == 0:
        return 0.0
    D = np.abs(a[:, None] - b[None, :])
    r, c = linear_sum_assignment(D)
    return float(D[r, c].max())


def block_structure_residual(ops: DiscreteOperators, law: FeedbackLaw, PN: np.ndarray):
    """Residuals of the triangular structure of AF with respect to P_N (reduced coordinates).

    Returns (stable-stable, stable-unstable): ``(I-P)AF(I-P) - (I-P)A(I-P)`` and
    ``(I-P)AF P - (I-P) B Kg P``, both relative to ``|AF|``.
    """
    Q = ops.Q
    A = ops.oseen_reduced
    AF = closed_loop_matrix(ops, law)
    I = np.eye(A.shape[0])
    Bq = Q.T @ law.input_matrix()
    Pq = law.vol * law.functional_matrix().conj().T @ Q
    nrm = np.linalg.norm(AF)
    r1 = np.linalg.norm((I - PN) @ AF @ (I - PN) - (I - PN) @ A @ (I - PN)) / nrm
    r2 = np.linalg.norm((I - PN) @ AF @ PN - (I - PN) @ Bq @ Pq @ PN) / nrm
    return float(r1), float(r2)
