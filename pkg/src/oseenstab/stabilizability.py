"""Actuator selection and Kalman-type rank tests for boundary + collar control."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .operators import DiscreteOperators, MACGrid, _avg_to_inner, tangential_trace
from .spectral import SpectralData, adjoint_normal_traces

log = logging.getLogger(__name__)

SVD_TOL = 1e-8
MAX_RETRIES = 8


class StabilizabilityError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# collar fields


def collar_tangent(mesh) -> np.ndarray:
    """Per-cell tangent (nx, ny, 2) inherited from the patch node each collar cell hangs off."""
    tau = np.zeros((*mesh.dims, mesh.d))
    for k in mesh.patch_nodes:
        ax = int(np.flatnonzero(mesh.normal[k])[0])
        inward = -int(np.sign(mesh.normal[k, ax]))
        for s in range(mesh.collar_depth):
            c = mesh.cell[k].copy()
            c[ax] += inward * s
            if not tau[tuple(c)].any():
                tau[tuple(c)] = mesh.tangent[k, 0]
    return tau


def collar_operator(grid: MACGrid) -> sp.csr_matrix:
    """Cell amplitudes a -> face field of (m a) tau, by face averaging of neighbouring cells."""
    mesh = grid.mesh
    nx, ny = grid.nx, grid.ny
    tau = collar_tangent(mesh) * mesh.collar_mask[..., None]
    Au = sp.kron(_avg_to_inner(nx), sp.eye(ny))
    Av = sp.kron(sp.eye(nx), _avg_to_inner(ny))
    return sp.vstack([Au @ sp.diags(tau[..., 0].ravel()), Av @ sp.diags(tau[..., 1].ravel())]).tocsr()


def discrete_normal_trace(ops: DiscreteOperators, v):
    """Tangential trace t(v) with <(A* - k) v, D g> = nu0 <t(v), g>_Gamma exactly."""
    g = ops.grid
    return g.vol * (ops.expr_IB.T @ v) / (ops.nu0 * g.face_area)


# ---------------------------------------------------------------------------


@dataclass
class ActuatorSet:
    f: np.ndarray        # (nb, K) tangential boundary amplitudes, zero off the patch
    u: np.ndarray        # (ncell, K) collar amplitudes, zero off the collar
    K: int
    retries: int = 0

    @classmethod
    def empty(cls, grid: MACGrid):
        return cls(np.zeros((grid.nb, 0)), np.zeros((grid.ncell, 0)), 0)


@dataclass
class RankEntry:
    eigenvalue: complex
    W: np.ndarray
    U: np.ndarray
    singular_values: np.ndarray
    rank: int
    boundary_rank: int
    ell: int

    @property
    def passed(self) -> bool:
        return self.rank == self.ell

    @property
    def boundary_passed(self) -> bool:
        return self.boundary_rank == self.ell


@dataclass
class ControllabilityReport:
    entries: list = field(default_factory=list)
    svd_tol: float = SVD_TOL

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def boundary_only_passed(self) -> bool:
        return all(e.boundary_passed for e in self.entries)

    def message(self) -> str:
        bad = [i for i, e in enumerate(self.entries) if not e.passed]
        if not bad:
            return "rank[-nu0 W_i | U_i] = l_i for every unstable eigenvalue"
        return f"rank[-nu0 W_i | U_i] = l_i fails for clusters {bad}"

    def to_dict(self):
        return {
            "passed": self.passed,
            "boundary_only_passed": self.boundary_only_passed,
            "clusters": [
                {
                    "eigenvalue": [float(e.eigenvalue.real), float(e.eigenvalue.imag)],
                    "ell": e.ell,
                    "rank": e.rank,
                    "boundary_rank": e.boundary_rank,
                    "singular_values": [float(s) for s in e.singular_values],
                    "passed": e.passed,
                }
                for e in self.entries
            ],
        }


def _numerical_rank(M, svd_tol):
    if M.size == 0:
        return np.zeros(0), 0
    s = np.linalg.svd(M, compute_uv=False)
    if s[0] == 0:
        return s, 0
    return s, int(np.sum(s > svd_tol * s[0]))


def build_W(spec: SpectralData, ops: DiscreteOperators, f, trace="discrete"):
    """Per cluster, (W_i)_{jk} = <f_k, d_nu phi*_ij>_Gamma-tilde."""
    grid = ops.grid
    f = np.asarray(f)
    out = []
    for idx in spec.clusters:
        T = np.zeros((grid.nb, len(idx)), dtype=complex)
        for c, j in enumerate(idx):
            v = spec.phi_adj[:, j]
            T[:, c] = discrete_normal_trace(ops, v) if trace == "discrete" else tangential_trace(grid, v)[0]
        T[~grid.mesh.patch_mask()] = 0.0
        out.append((T * grid.face_area[:, None]).conj().T @ f)
    return out


def build_U(spec: SpectralData, ops: DiscreteOperators, u):
    """Per cluster, (U_i)_{jk} = <u_k, phi*_ij . tau>_omega."""
    grid = ops.grid
    C = collar_operator(grid)
    fields = C @ np.asarray(u)
    return [grid.vol * spec.phi_adj[:, idx].conj().T @ fields for idx in spec.clusters]


def rank_test(W_list, U_list, nu0, eigenvalues=None, svd_tol=SVD_TOL) -> ControllabilityReport:
    entries = []
    for i, (W, U) in enumerate(zip(W_list, U_list)):
        ell = W.shape[0]
        aug = np.hstack([-nu0 * W, U])
        s, r = _numerical_rank(aug, svd_tol)
        _, rb = _numerical_rank(W, svd_tol)
        lam = eigenvalues[i] if eigenvalues is not None else np.nan
        entries.append(RankEntry(complex(lam), W, U, s, r, rb, ell))
    return ControllabilityReport(entries, svd_tol)


def controllability(spec, ops, act: ActuatorSet, svd_tol=SVD_TOL, trace="discrete"):
    W = build_W(spec, ops, act.f, trace=trace)
    U = build_U(spec, ops, act.u)
    lams = [spec.eigenvalues[idx[0]] for idx in spec.clusters]
    return rank_test(W, U, ops.nu0, lams, svd_tol)


def _real_directions(T, weights, K):
    """K leading real directions of span{Re T, Im T}, orthonormal in the weighted pairing."""
    sw = np.sqrt(weights)[:, None]
    R = np.hstack([T.real, T.imag]) * sw
    Uv, s, _ = np.linalg.svd(R, full_matrices=False)
    keep = s > 1e-14 * max(s[0], 1e-300) if s.size else np.zeros(0, bool)
    Uv = Uv[:, keep][:, :K]
    out = Uv / sw
    # deterministic sign: largest entry positive
    for k in range(out.shape[1]):
        if out[np.argmax(np.abs(out[:, k])), k] < 0:
            out[:, k] *= -1
    return out


def _orthonormalize(F, weights):
    sw = np.sqrt(weights)[:, None]
    Qm, _ = np.linalg.qr(F * sw)
    return Qm / sw


def select_actuators(spec: SpectralData, ops: DiscreteOperators, strategy="greedy-svd", rng=None,
                     max_retries=MAX_RETRIES, svd_tol=SVD_TOL):
    """Choose K boundary and K collar actuators and confirm the rank test.

    Returns (ActuatorSet, ControllabilityReport).
    """
    grid = ops.grid
    if spec.M == 0:
        act = ActuatorSet.empty(grid)
        return act, ControllabilityReport([], svd_tol)
    if strategy != "greedy-svd":
        raise ValueError(f"unknown actuator strategy {strategy!r}")
    rng = np.random.default_rng(0) if rng is None else rng
    K = spec.K
    traces = adjoint_normal_traces(spec, ops)
    Tb = traces.tangential[:, : spec.N]
    C = collar_operator(grid)
    Tc = (C.T @ spec.phi_adj[:, : spec.N]) * grid.mesh.collar_mask.ravel()[:, None]
    cell_w = np.full(grid.ncell, grid.vol)
    f = _real_directions(Tb, grid.face_area, K)
    u = _real_directions(Tc, cell_w, K)
    if f.shape[1] < K:
        f = np.hstack([f, np.zeros((grid.nb, K - f.shape[1]))])
    if u.shape[1] < K:
        u = np.hstack([u, np.zeros((grid.ncell, K - u.shape[1]))])
    pmask = grid.mesh.patch_mask()[:, None]
    cmask = grid.mesh.collar_mask.ravel()[:, None] != 0
    # exact supports; the SVD leaves roundoff outside them
    f, u = f * pmask, u * cmask
    act = ActuatorSet(f, u, K)
    rep = controllability(spec, ops, act, svd_tol)
    retries = 0
    basis_b = np.hstack([Tb.real, Tb.imag])
    basis_c = np.hstack([Tc.real, Tc.imag])
    while not rep.passed and retries < max_retries:
        retries += 1
        # random elements of the trace span, re-orthonormalized on the supports
        f = _orthonormalize(f + basis_b @ rng.standard_normal((basis_b.shape[1], K)) * 0.5, grid.face_area)
        u = _orthonormalize(u + basis_c @ rng.standard_normal((basis_c.shape[1], K)) * 0.5, cell_w)
        f, u = f * pmask, u * cmask
        act = ActuatorSet(f, u, K, retries)
        rep = controllability(spec, ops, act, svd_tol)
    if not rep.passed:
        raise StabilizabilityError(
            f"no actuator set reaches full rank after {max_retries} retries; the adjoint traces may "
            f"lie in a unique-continuation-failure direction ({rep.message()})")
    return act, rep


# ---------------------------------------------------------------------------


def ucp_counterexample_check(mesh, a=1.0):
    """Residuals of the boundary-overdetermined Stokes fields u = (0, a x^2), p = 2 a y.

    Returns dict with the interior residual of Lap u = grad p (on faces away
    from the walls), the divergence, and the Cauchy data |u|, |grad u| on x = 0.
    """
    grid = MACGrid(mesh)
    nx, ny, hx, hy = grid.nx, grid.ny, grid.hx, grid.hy
    x_v = (np.arange(nx) + 0.5) * hx
    y_v = np.arange(ny + 1) * hy
    V = a * np.broadcast_to(x_v[:, None] ** 2, (nx, ny + 1))
    U = np.zeros((nx + 1, ny))
    yc = (np.arange(ny) + 0.5) * hy
    p = 2 * a * np.broadcast_to(yc[None, :], (nx, ny))
    # five-point Laplacian at v faces strictly inside, against the staggered pressure gradient
    lapV = (V[2:, 1:-1] - 2 * V[1:-1, 1:-1] + V[:-2, 1:-1]) / hx**2 + (
        V[1:-1, 2:] - 2 * V[1:-1, 1:-1] + V[1:-1, :-2]) / hy**2
    gpy = (p[1:-1, 1:] - p[1:-1, :-1]) / hy
    lapU = (U[2:, 1:-1] - 2 * U[1:-1, 1:-1] + U[:-2, 1:-1]) / hx**2
    gpx = (p[1:, 1:-1] - p[:-1, 1:-1]) / hx
    res = max(np.max(np.abs(lapV[:, :] - gpy[:, :])), np.max(np.abs(lapU - gpx)))
    div = np.max(np.abs((U[1:] - U[:-1]) / hx + (V[:, 1:] - V[:, :-1]) / hy))
    # Cauchy data on x = 0: values by extrapolation, normal derivative one-sided
    v_wall = (15 * V[0] - 10 * V[1] + 3 * V[2]) / 8
    dv_dx = (9 * V[0] - V[1]) / (3 * hx)
    dv_dy = np.diff(v_wall) / hy
    cauchy = max(np.max(np.abs(U[0])), np.max(np.abs(v_wall)), np.max(np.abs(dv_dx)),
                 np.max(np.abs(dv_dy)) if dv_dy.size else 0.0)
    return {"a": float(a), "interior_residual": float(res), "divergence": float(div),
            "cauchy_data": float(cauchy)}
