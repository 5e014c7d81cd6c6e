"""Rightmost spectrum of the Oseen operator, unstable clusters and the spectral projector.

Operators are handled in the orthonormal solenoidal basis ``Q`` when it is
available (dense path), or as saddle-point shift-invert solves in the full
face space (Arnoldi path).  Direct eigenvectors ``phi`` and adjoint
eigenvectors ``phi_adj`` are returned as full face-space vectors, normalized
so that ``<phi_a, phi_adj_b> = delta_ab`` in the cell-weighted L2 pairing.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from .operators import DiscreteOperators

log = logging.getLogger(__name__)

SVD_TOL = 1e-8
GAP_MIN = 1e-4
DENSE_CUTOFF = 6000
N_QUAD = 64
GAMMA0_MARGIN = 0.05


class SpectralError(RuntimeError):
    pass


@dataclass
class OperatorView:
    """A real operator in orthonormal coordinates, ``A`` (r x r) with basis ``Q`` (n x r)."""

    A: np.ndarray
    Q: np.ndarray | None = None
    vol: float = 1.0

    def lift(self, x):
        return x if self.Q is None else self.Q @ x

    def restrict(self, v):
        return v if self.Q is None else self.Q.T @ v


def as_view(op) -> OperatorView:
    if isinstance(op, OperatorView):
        return op
    if isinstance(op, DiscreteOperators):
        return OperatorView(op.oseen_reduced, op.Q, op.grid.vol)
    A = np.asarray(op)
    return OperatorView(A, None, 1.0)


@dataclass
class SpectralData:
    eigenvalues: np.ndarray          # sorted by descending real part
    phi: np.ndarray                  # (n, n_found) direct eigenvectors
    phi_adj: np.ndarray              # (n, n_found) adjoint eigenvectors, biorthonormal
    vol: float = 1.0
    method: str = "dense"
    residuals: np.ndarray | None = None
    N: int = 0
    M: int = 0
    clusters: list = field(default_factory=list)       # index arrays into the unstable set
    multiplicities: list = field(default_factory=list)  # geometric, per cluster
    ambiguous: bool = False
    PN: np.ndarray | None = None     # reduced projector (r x r) when a basis is available
    view: OperatorView | None = None

    @property
    def K(self) -> int:
        return max(self.multiplicities, default=0)

    @property
    def unstable(self) -> np.ndarray:
        return self.eigenvalues[: self.N]

    @property
    def lam_next(self) -> complex | None:
        return self.eigenvalues[self.N] if len(self.eigenvalues) > self.N else None

    @property
    def gamma0(self) -> float:
        lam = self.lam_next
        if lam is None:
            raise SpectralError("no stable eigenvalue computed; raise n_wanted")
        return (1.0 - GAMMA0_MARGIN) * abs(lam.real)

    @property
    def abscissa(self) -> float:
        return float(self.eigenvalues[0].real)

    def cluster_ids(self):
        ids = -np.ones(len(self.eigenvalues), dtype=int)
        for c, idx in enumerate(self.clusters):
            ids[idx] = c
        return ids

    def coords(self, w):
        """Biorthogonal coordinates <w, phi_adj_a> of the unstable part."""
        return self.vol * (self.phi_adj[:, : self.N].conj().T @ w)

    def project(self, w):
        return self.phi[:, : self.N] @ self.coords(w)


def _inner(vol, a, b):
    return vol * np.vdot(b, a)


def _order(lam):
    # descending real part; conjugate partners adjacent, positive imaginary first
    key = np.lexsort((-lam.imag, -np.round(lam.real, 10)))
    return key


def _pair_conjugates(lam, X, Y, tol):
    """Force exact conjugate symmetry of eigenpairs of a real operator."""
    lam = lam.astype(complex)
    X = X.astype(complex)
    Y = Y.astype(complex)
    used = np.zeros(len(lam), dtype=bool)
    for a in range(len(lam)):
        if used[a] or lam[a].imag <= tol:
            if abs(lam[a].imag) <= tol:
                lam[a] = lam[a].real
                X[:, a] = _realify_vector(X[:, a])
                Y[:, a] = _realify_vector(Y[:, a])
            continue
        d = np.abs(lam - lam[a].conjugate())
        d[used] = np.inf
        d[a] = np.inf
        b = int(np.argmin(d))
        if d[b] <= max(tol, 1e-6 * abs(lam[a])):
            lam[b] = lam[a].conjugate()
            X[:, b] = X[:, a].conj()
            Y[:, b] = Y[:, a].conj()
            used[a] = used[b] = True
    return lam, X, Y


def _realify_vector(x):
    # rotate a numerically real eigenvector onto the real axis
    k = int(np.argmax(np.abs(x)))
    ph = x[k] / abs(x[k]) if x[k] != 0 else 1.0
    return (x / ph).real.astype(complex)


def _biorthonormalize(lam, X, Y, vol, tol_group):
    groups = _group(lam, tol_group)
    for idx in groups:
        Mx = vol * (Y[:, idx].conj().T @ X[:, idx])
        if np.linalg.cond(Mx) > 1e10:
            raise SpectralError(f"biorthogonalization breakdown near eigenvalue {lam[idx[0]]:.6g}")
        Y[:, idx] = Y[:, idx] @ np.linalg.inv(Mx).conj().T
    return Y


def _group(lam, tol):
    """Single-linkage clusters of eigenvalues within ``tol`` (complex modulus)."""
    n = len(lam)
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for a in range(n):
        for b in range(a + 1, n):
            if abs(lam[a] - lam[b]) <= tol:
                parent[find(a)] = find(b)
    groups = {}
    for a in range(n):
        groups.setdefault(find(a), []).append(a)
    return sorted((np.array(g) for g in groups.values()), key=lambda g: g[0])


def _residuals(apply, lam, X):
    return np.array([np.linalg.norm(apply(X[:, j]) - lam[j] * X[:, j]) / max(np.linalg.norm(X[:, j]), 1e-300)
                     for j in range(X.shape[1])])


def _dense(view: OperatorView, n_wanted):
    A = view.A
    lam, VL, VR = sla.eig(A, left=True, right=True)
    order = _order(lam)[:n_wanted]
    lam, X, Y = lam[order], VR[:, order], VL[:, order]
    return lam, X, Y


def _arnoldi(ops: DiscreteOperators, n_wanted, sigma=None, ncv=None, max_tries=2):
    """Shift-invert Arnoldi on the saddle-point system for 𝒜 and its adjoint."""
    grid = ops.grid
    n = grid.n
    if sigma is None:
        sigma = 0.0
    k = min(n_wanted + 10, n - 2)

    def make_op(transpose):
        K = ops.saddle_matrix(sigma if not transpose else np.conj(sigma), transpose=transpose)
        if np.iscomplexobj(sigma):
            K = K.astype(complex)
        lu = spla.splu(K.tocsc())
        dtype = complex if np.iscomplexobj(sigma) else float

        def mv(b):
            rhs = np.zeros(K.shape[0], dtype=np.result_type(b, dtype))
            rhs[:n] = -b
            return lu.solve(rhs)[:n]
        return spla.LinearOperator((n, n), matvec=mv, dtype=dtype)

    rng = np.random.default_rng(0)
    v0 = ops.leray.apply(rng.standard_normal(n))
    results = []
    for transpose in (False, True):
        op = make_op(transpose)
        ncv_t = ncv or min(n - 1, max(2 * k + 1, 40))
        for attempt in range(max_tries + 1):
            try:
                mu, V = spla.eigs(op, k=k, which="LM", v0=v0, ncv=ncv_t, tol=1e-12, maxiter=5000)
                break
            except spla.ArpackNoConvergence as exc:
                if attempt == max_tries:
                    raise SpectralError(f"Arnoldi did not converge: {exc}") from exc
                ncv_t = min(n - 1, 2 * ncv_t)
                log.info("Arnoldi retry with ncv=%d", ncv_t)
        lam = 1.0 / mu + (sigma if not transpose else np.conj(sigma))
        results.append((lam, V))
    (lam, X), (lam_t, Yt) = results
    order = _order(lam)[:n_wanted]
    lam, X = lam[order], X[:, order]
    # match adjoint eigenvalues: 𝒜* has the conjugate spectrum
    Y = np.zeros_like(X, dtype=complex)
    for j, l in enumerate(lam):
        m = int(np.argmin(np.abs(lam_t - np.conj(l))))
        Y[:, j] = Yt[:, m]
    return lam, X.astype(complex), Y


def compute_spectrum(op, n_wanted=20, method="auto", dense_cutoff=DENSE_CUTOFF, sigma=None,
                     tol_group=None) -> SpectralData:
    """Rightmost ``n_wanted`` eigenpairs of the operator and of its adjoint."""
    ops = op if isinstance(op, DiscreteOperators) else None
    if method == "auto":
        method = "dense" if ops is None or ops.grid.n <= dense_cutoff else "arnoldi"
    if method == "dense":
        view = as_view(op)
        lam, Xr, Yr = _dense(view, n_wanted)
        apply = lambda x: view.A @ x
        lam, Xr, Yr = _pair_conjugates(lam, Xr, Yr, 1e-10 * max(1.0, np.max(np.abs(lam))))
        res = _residuals(apply, lam, Xr)
        X, Y = view.lift(Xr), view.lift(Yr)
        vol = view.vol
    elif method == "arnoldi":
        if ops is None:
            raise ValueError("arnoldi path needs DiscreteOperators")
        view = None
        lam, X, Y = _arnoldi(ops, n_wanted, sigma)
        lam, X, Y = _pair_conjugates(lam, X, Y, 1e-9 * max(1.0, np.max(np.abs(lam))))
        res = _residuals(ops.oseen_apply, lam, X)
        vol = ops.grid.vol
    else:
        raise ValueError(f"unknown method {method!r}")
    # unit L2 norm for direct vectors
    X = X / np.sqrt(vol * np.sum(np.abs(X) ** 2, axis=0))
    if tol_group is None:
        unst = np.abs(lam[lam.real >= 0])
        tol_group = 1e-6 * (unst.max() if unst.size else 1.0)
    Y = _biorthonormalize(lam, X, Y, vol, tol_group)
    bad = res > 1e-8 * np.maximum(1.0, np.abs(lam))
    if np.any(bad):
        log.warning("eigenpair residuals above tolerance: %s", res[bad])
    spec = SpectralData(lam, X, Y, vol, method, res, view=view)
    return group_unstable(spec, tol_group)


def group_unstable(spec: SpectralData, tol_group=None, svd_tol=SVD_TOL, gap_min=GAP_MIN) -> SpectralData:
    """Count unstable eigenvalues, cluster them and read off geometric multiplicities."""
    lam = spec.eigenvalues
    close = np.abs(lam.real) < gap_min
    if np.any(close):
        raise SpectralError(
            f"eigenvalue(s) {lam[close]} within gap_min={gap_min} of the imaginary axis; perturb nu0")
    N = int(np.sum(lam.real >= 0))
    if N == len(lam):
        raise SpectralError("all computed eigenvalues are unstable; raise n_wanted")
    if tol_group is None:
        tol_group = 1e-6 * (np.max(np.abs(lam[:N])) if N else 1.0)
    clusters = _group(lam[:N], tol_group) if N else []
    mult, ambiguous = [], False
    for idx in clusters:
        if len(idx) > 1:
            diam = max(abs(lam[a] - lam[b]) for a in idx for b in idx)
            ambiguous |= diam > 10 * tol_group
        s = np.linalg.svd(spec.phi[:, idx], compute_uv=False)
        mult.append(int(np.sum(s > svd_tol * s[0])))
    spec.N, spec.M = N, len(clusters)
    spec.clusters, spec.multiplicities, spec.ambiguous = clusters, mult, ambiguous
    if ambiguous:
        log.warning("ambiguous grouping of unstable eigenvalues")
    return spec


# ---------------------------------------------------------------------------
# projector


def _schur_projector(A):
    _, U, sdim = sla.schur(A.astype(complex), output="complex", sort=lambda z: z.real >= 0)
    _, V, sdim_t = sla.schur(A.conj().T.astype(complex), output="complex", sort=lambda z: z.real >= 0)
    if sdim != sdim_t:
        raise SpectralError("direct and adjoint unstable dimensions differ")
    if sdim == 0:
        return np.zeros_like(A, dtype=complex)
    U, V = U[:, :sdim], V[:, :sdim]
    return U @ np.linalg.solve(V.conj().T @ U, V.conj().T)


def _contour_projector(A, lam_all, N, n_quad=N_QUAD, cond_max=1e12):
    """Sum of resolvent integrals over small circles around each unstable cluster."""
    n = A.shape[0]
    P = np.zeros((n, n), dtype=complex)
    if N == 0:
        return P
    unst, rest = lam_all[:N], lam_all[N:]
    centers = []
    for z in unst:
        if all(abs(z - c) > 1e-8 * max(1, abs(z)) for c in centers):
            centers.append(z)
    I = np.eye(n)
    for c in centers:
        others = np.concatenate([rest, [z for z in unst if abs(z - c) > 1e-8 * max(1, abs(c))]])
        radius = 0.5 * np.min(np.abs(others - c)) if len(others) else 1.0
        for attempt in range(2):
            theta = 2 * np.pi * (np.arange(n_quad) + 0.5) / n_quad
            acc = np.zeros((n, n), dtype=complex)
            ok = True
            for t in theta:
                z = c + radius * np.exp(1j * t)
                R = z * I - A
                lu = sla.lu_factor(R)
                if 1.0 / max(np.abs(np.diag(lu[0])).min(), 1e-300) * np.abs(R).max() > cond_max:
                    ok = False
                    break
                acc += sla.lu_solve(lu, I) * radius * np.exp(1j * t)
            if ok:
                break
            radius *= 0.5
        else:
            raise SpectralError("contour passes through the spectrum")
        P += acc / n_quad
    return P


def spectral_projector(spec: SpectralData, method="schur", n_quad=N_QUAD) -> np.ndarray:
    """Reduced-coordinate projector onto the unstable subspace."""
    if spec.view is None:
        # eigenvector form; valid for a diagonalizable unstable block
        return None
    A = spec.view.A
    if spec.N == 0:
        P = np.zeros_like(A, dtype=complex)
    elif method == "schur":
        P = _schur_projector(A)
    elif method == "contour":
        lam_all = np.sort_complex(sla.eigvals(A))
        lam_all = lam_all[_order(lam_all)]
        P = _contour_projector(A, lam_all, spec.N, n_quad)
    else:
        raise ValueError(f"unknown projector method {method!r}")
    spec.PN = P
    return P


def stable_abscissa(spec: SpectralData, P=None) -> float:
    """Spectral abscissa of (I - P_N) A (I - P_N) restricted to the stable subspace."""
    A = spec.view.A
    P = spec.PN if P is None else P
    I = np.eye(A.shape[0])
    lam = sla.eigvals((I - P) @ A @ (I - P))
    # the projected-out unstable directions contribute zero eigenvalues
    lam = lam[np.abs(lam) > 1e-9 * np.abs(A).max()]
    return float(lam.real.max())


# ---------------------------------------------------------------------------
# boundary traces of adjoint eigenvectors


@dataclass
class TraceData:
    tangential: np.ndarray   # (nb, N) tangential amplitudes on Gamma-tilde, zero elsewhere
    normal_raw: np.ndarray   # (nb, N) normal component before projection
    flagged: list


def adjoint_normal_traces(spec: SpectralData, ops: DiscreteOperators, n=None) -> TraceData:
    """One-sided normal-derivative traces of the adjoint eigenvectors on the patch."""
    from .operators import tangential_trace

    grid = ops.grid
    n = spec.N if n is None else n
    mask = grid.mesh.patch_mask()
    tang = np.zeros((grid.nb, n), dtype=complex)
    nrm = np.zeros((grid.nb, n), dtype=complex)
    flagged = []
    for j in range(n):
        t, nn = tangential_trace(grid, spec.phi_adj[:, j])
        nrm[:, j] = nn
        tang[:, j] = np.where(mask, t, 0.0)
        if np.sqrt(np.sum(grid.face_area * np.abs(tang[:, j]) ** 2)) < 1e-12:
            flagged.append(j)
            log.warning("adjoint trace %d vanishes on the patch (possible UCP-failure direction)", j)
    return TraceData(tang, nrm, flagged)


def write_spectrum_csv(spec: SpectralData, path):
    ids = spec.cluster_ids()
    mult = np.zeros(len(spec.eigenvalues), dtype=int)
    for c, idx in enumerate(spec.clusters):
        mult[idx] = spec.multiplicities[c]
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["re", "im", "unstable_flag", "cluster_id", "multiplicity"])
        for j, lam in enumerate(spec.eigenvalues):
            w.writerow([f"{lam.real:.12e}", f"{lam.imag:.12e}", int(j < spec.N), int(ids[j]), int(mult[j])])
