import numpy as np
import pytest
import sympy as sy
from hypothesis import given, settings, strategies as st

from oseenstab.mesh import setup_mesh
from oseenstab.operators import (
    LerayProjector, MACGrid, OperatorError, adjoint_identity_residual, assemble_dirichlet_map,
    assemble_oseen, dump_field_csv, dump_matrix, load_field_csv, load_matrix, manufactured_field,
    normal_derivative, random_boundary_data, random_solenoidal, solve_equilibrium, tangential_trace)
from oseenstab.simulation import steady_pressure
from oseenstab.stabilizability import discrete_normal_trace

from conftest import make_grid


def test_laplacian_symmetric_and_div_curl(grid16):
    L, _ = grid16.laplacian
    assert abs(L - L.T).max() < 1e-10
    assert abs(grid16.div @ grid16.curl).max() < 1e-10


def test_laplacian_second_order():
    errs = []
    for n in (8, 16, 32):
        g = make_grid(n)
        L, LB = g.laplacian
        (xu, yu), (xv, yv) = g.coords()
        U = np.sin(np.pi * xu) * np.cos(np.pi * yu)
        V = -np.cos(np.pi * xv) * np.sin(np.pi * yv)
        x = g.join(U, V)
        P, tau = g.mesh.position, g.mesh.tangent[:, 0]
        uu = np.sin(np.pi * P[:, 0]) * np.cos(np.pi * P[:, 1])
        vv = -np.cos(np.pi * P[:, 0]) * np.sin(np.pi * P[:, 1])
        gb = uu * tau[:, 0] + vv * tau[:, 1]
        errs.append(np.abs(L @ x + LB @ gb + 2 * np.pi ** 2 * x).max())
    assert errs[0] / errs[1] > 1.8 and errs[1] / errs[2] > 1.8


def test_leray_is_orthogonal_projector(grid16):
    P = LerayProjector(grid16).matrix()
    Q = grid16.solenoidal_basis
    assert np.abs(P @ P - P).max() < 1e-10
    assert np.abs(P - P.T).max() < 1e-10
    assert np.abs(P - Q @ Q.T).max() < 1e-10
    assert np.abs(grid16.div @ P).max() < 1e-10


def test_leray_kills_gradients(grid16, rng):
    phi = rng.standard_normal(grid16.ncell)
    assert np.abs(LerayProjector(grid16).apply(grid16.grad @ phi)).max() < 1e-10


def test_stokes_spectrum_approaches_continuum(stokes16):
    from oseenstab.norms import StokesBasis
    # first Dirichlet Stokes eigenvalue of the unit square is about 52.3447
    mu16 = StokesBasis(stokes16).mu[0]
    g32 = make_grid(32)
    o32 = assemble_oseen(g32, 1.0, np.zeros(g32.n))
    mu32 = StokesBasis(o32).mu[0]
    assert mu16 == pytest.approx(51.6178, rel=1e-3)
    assert mu32 == pytest.approx(52.160, rel=1e-3)
    assert abs(mu32 - 52.3447) < abs(mu16 - 52.3447)


def test_stokes_operator_symmetric_negative(stokes16):
    A = stokes16.stokes_reduced
    assert np.abs(A - A.T).max() < 1e-8 * np.abs(A).max()
    assert np.linalg.eigvalsh(0.5 * (A + A.T)).min() > 0


def test_manufactured_equilibrium_zero_residual(grid16):
    ye = manufactured_field(grid16, 2.0, "shear-cell")
    eq = solve_equilibrium(grid16, 1e-2, "manufactured", ye=ye)
    assert eq.residual_norm < 1e-9
    assert np.abs(grid16.div @ ye).max() < 1e-10


def test_manufactured_rejects_divergent_field(grid16, rng):
    with pytest.raises(OperatorError):
        solve_equilibrium(grid16, 1e-2, "manufactured", ye=rng.standard_normal(grid16.n))


def test_unknown_profile(grid16):
    with pytest.raises(ValueError, match="unknown profile"):
        manufactured_field(grid16, 1.0, "nope")


def test_newton_gradient_force(grid16):
    X, Y = grid16.cell_centers()
    phi = (np.cos(np.pi * X) * np.cos(2 * np.pi * Y)).ravel()
    eq = solve_equilibrium(grid16, 1e-2, "newton", f=grid16.grad @ phi)
    assert eq.converged and eq.iterations == 1
    assert np.abs(eq.ye).max() < 1e-10
    assert np.abs(eq.pie - (phi - phi.mean())).max() < 1e-9


def test_newton_recovers_manufactured(grid16):
    ye = manufactured_field(grid16, 2.0, "shear-cell")
    m = solve_equilibrium(grid16, 1e-2, "manufactured", ye=ye)
    exact = solve_equilibrium(grid16, 1e-2, "newton", f=m.f, guess=ye)
    assert exact.converged and exact.iterations == 0
    cold = solve_equilibrium(grid16, 1e-2, "newton", f=m.f)
    assert cold.converged
    assert np.abs(cold.ye - ye).max() < 1e-10


def test_newton_needs_force(grid16):
    with pytest.raises(ValueError):
        solve_equilibrium(grid16, 1e-2, "newton")


def test_nu0_positive(grid16):
    with pytest.raises(ValueError):
        assemble_oseen(grid16, 0.0)


def test_dirichlet_map_columns(stokes16):
    ops = stokes16
    g = ops.grid
    assert np.abs(g.div @ ops.Dmap).max() < 1e-9
    # interior equation (k - nu0 Lap) psi + grad pi = 0 holds up to a gradient
    E = np.eye(g.nb)[:, :5]
    r = ops.k_shift * (ops.Dmap @ E) + ops.expr_II @ (ops.Dmap @ E) + ops.expr_IB @ E
    assert np.abs(ops.leray.apply(r)).max() < 1e-8 * max(1.0, np.abs(r).max())


def test_discrete_trace_matches_dirichlet_map(stokes16, rng):
    ops = stokes16
    g = ops.grid
    v = random_solenoidal(g, rng)
    f = random_boundary_data(g, rng)
    t = discrete_normal_trace(ops, v)
    lhs = ops.inner(ops.Dmap @ f, ops.leray.apply(-(ops.expr_II.T @ v)) - ops.k_shift * v)
    rhs = ops.nu0 * np.sum(g.face_area * t * f)
    assert abs(lhs - rhs) < 1e-9 * max(1.0, abs(rhs))


def test_adjoint_identity_refines(rng):
    pooled = []
    for n in (16, 32):
        g = make_grid(n)
        ops = assemble_oseen(g, 1e-2, np.zeros(g.n))
        assemble_dirichlet_map(ops)
        r = np.random.default_rng(1)
        res = [adjoint_identity_residual(ops, random_solenoidal(g, r), random_boundary_data(g, r))[0]
               for _ in range(6)]
        pooled.append(np.median(res))
    assert pooled[1] < pooled[0]
    assert pooled[1] < 0.05


def test_tangentiality_second_order():
    vals = []
    for n in (16, 32, 64):
        g = make_grid(n)
        r = np.random.default_rng(2)
        vals.append(max(np.abs(tangential_trace(g, random_solenoidal(g, r))[1]).max() for _ in range(4)))
    order = np.polyfit(np.log([16, 32, 64]), np.log(vals), 1)[0]
    assert order < -1.5


def test_normal_derivative_shape(grid16, rng):
    dn = normal_derivative(grid16, random_solenoidal(grid16, rng))
    assert dn.shape == (grid16.nb, 2)


def _sympy_fields():
    x, y = sy.symbols("x y")
    psi = 2 * sy.sin(sy.pi * x) ** 2 * sy.sin(sy.pi * y) ** 3 * sy.cos(sy.pi * y)
    u, v = -sy.diff(psi, y), sy.diff(psi, x)
    p = sy.cos(sy.pi * x) * sy.cos(sy.pi * y)
    nu = sy.Rational(1, 100)
    lap = lambda w: sy.diff(w, x, 2) + sy.diff(w, y, 2)
    fx = -nu * lap(u) + u * sy.diff(u, x) + v * sy.diff(u, y) + sy.diff(p, x)
    fy = -nu * lap(v) + u * sy.diff(v, x) + v * sy.diff(v, y) + sy.diff(p, y)
    return [sy.lambdify((x, y), e, "numpy") for e in (fx, fy, u, v, p)]


def test_stream_sign_convention():
    F = _sympy_fields()
    g = make_grid(32)
    (Xu, Yu), (Xv, Yv) = g.coords()
    U, V = g.split(manufactured_field(g, 2.0, "shear-cell"))
    assert np.abs(U - F[2](Xu, Yu)).max() < 0.05 * np.abs(U).max()
    assert np.abs(V - F[3](Xv, Yv)).max() < 0.05 * np.abs(V).max()


def test_pressure_recovery_second_order():
    F = _sympy_fields()
    errs = []
    for n in (16, 32, 64):
        g = make_grid(n)
        (Xu, Yu), (Xv, Yv) = g.coords()
        f = g.join(F[0](Xu, Yu), F[1](Xv, Yv))
        chi = steady_pressure(g, 0.01, manufactured_field(g, 2.0, "shear-cell"), f)
        Xc, Yc = g.cell_centers()
        pe = F[4](Xc, Yc).ravel()
        errs.append(np.abs(chi - (pe - pe.mean())).max())
    assert errs[0] / errs[1] > 3 and errs[1] / errs[2] > 3


def test_matrix_dump_roundtrip(tmp_path, stokes16):
    p = tmp_path / "m.txt"
    A = stokes16.expr_II
    dump_matrix(A, p)
    head = p.read_text().splitlines()[0].split()
    assert [int(s) for s in head] == [A.shape[0], A.shape[1], A.nnz]
    assert abs(load_matrix(p) - A).max() == 0


def test_field_csv_roundtrip(tmp_path, grid16, rng):
    z = random_solenoidal(grid16, rng)
    p = tmp_path / "f.csv"
    dump_field_csv(grid16, z, p)
    assert p.read_text().splitlines()[0] == "i,j,x,y,u,v"
    assert np.allclose(load_field_csv(grid16, p), grid16.to_cells(z))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_random_fields_solenoidal(seed):
    g = make_grid(8)
    z = random_solenoidal(g, np.random.default_rng(seed))
    assert np.abs(g.div @ z).max() < 1e-10
