import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oseenstab.norms import nonlinearity_constant
from oseenstab.operators import random_solenoidal
from oseenstab.pipeline import unit_probe
from oseenstab.simulation import (
    basin_search, contraction_chain, default_horizon, fit_decay, flow_norm, nonlinear_term,
    orbit_contraction, recover_pressure, simulate_linear, simulate_nonlinear)


@pytest.fixture(scope="module")
def law16(unstable16):
    return unstable16.designs[0].law


@pytest.fixture(scope="module")
def horizon(unstable16):
    return default_horizon(unstable16.spec.gamma0)


def test_default_horizon():
    T, dt = default_horizon(0.5)
    assert T == 20.0 and dt == pytest.approx(0.01)


def test_zero_state_stays_zero(unstable16, law16):
    ops = unstable16.ops
    z0 = np.zeros(ops.grid.n)
    tr = simulate_linear(unstable16.closed.AF, z0, 1.0, 0.01, ops=ops, law=law16)
    assert np.all(tr.l2 == 0)
    trn = simulate_nonlinear(ops, law16, z0, 1.0, 0.01)
    assert np.all(trn.l2 == 0) and not trn.blowup


def test_dt_guard(unstable16):
    with pytest.raises(ValueError, match="T/100"):
        simulate_linear(unstable16.closed.AF, np.zeros(unstable16.grid.n), 1.0, 0.5, ops=unstable16.ops)


def test_fit_decay_exact_exponential():
    t = np.linspace(0, 10, 501)
    fit = fit_decay(t, 3.0 * np.exp(-0.7 * t))
    assert fit.gamma_fit == pytest.approx(0.7, rel=1e-10)
    assert fit.C_fit == pytest.approx(1.0, rel=1e-8)
    assert fit.r2 == pytest.approx(1.0)
    assert not fit.low_confidence
    assert orbit_contraction(t, 3.0 * np.exp(-0.7 * t), 2.0) == pytest.approx(np.exp(-1.4), rel=1e-3)


def test_fit_decay_needs_samples():
    with pytest.raises(ValueError, match="samples"):
        fit_decay(np.arange(5.0), np.ones(5))


def test_contraction_chain_rows():
    t = np.linspace(0, 9, 901)
    beta, rows = contraction_chain(t, np.exp(-0.5 * t), 3.0)
    assert beta == pytest.approx(np.exp(-1.5), rel=1e-3)
    assert [r[0] for r in rows] == [0, 1, 2, 3]
    for _, norm, bound in rows:
        assert norm <= bound * (1 + 1e-3)


def test_flow_norm_scalar():
    assert flow_norm(np.array([[-2.0]]), 0.5) == pytest.approx(np.exp(-1.0))


def test_open_loop_growth_rate(unstable16):
    ops, spec = unstable16.ops, unstable16.spec
    tr = simulate_linear(ops.oseen_reduced, unit_probe(unstable16), 4.0, 0.004, ops=ops)
    assert fit_decay(tr.times, tr.l2).gamma_fit == pytest.approx(-spec.abscissa, rel=0.05)


def test_closed_loop_linear_rate(unstable16, law16, horizon):
    T, dt = horizon
    AF = unstable16.closed.AF
    tr = simulate_linear(AF, unit_probe(unstable16), T, dt, ops=unstable16.ops, law=law16)
    fit = fit_decay(tr.times, tr.l2)
    assert fit.gamma_fit == pytest.approx(-unstable16.closed.abscissa, rel=0.05)
    assert tr.nu.shape == (len(tr), law16.p.shape[1])


def test_small_amplitude_nonlinear_matches_linear(unstable16, law16, horizon):
    T, dt = horizon
    tr = simulate_nonlinear(unstable16.ops, law16, 1e-4 * unit_probe(unstable16), T, dt, record_every=10)
    fit = fit_decay(tr.times, tr.l2)
    assert fit.gamma_fit == pytest.approx(-unstable16.closed.abscissa, rel=0.05)
    assert tr.div_max < 1e-10
    assert tr.trace_error == 0.0
    assert not tr.blowup and not tr.truncated


def test_large_amplitude_flagged(unstable16, law16, horizon):
    T, dt = horizon
    tr = simulate_nonlinear(unstable16.ops, law16, 1e3 * unit_probe(unstable16), T, dt)
    assert tr.blowup or tr.truncated
    assert tr.times[-1] < T


def test_open_loop_basin_empty(unstable16, horizon):
    T, dt = horizon
    b = basin_search(unstable16.ops, None, unit_probe(unstable16), T / 3, dt, 1e-5, 1.0, 3)
    assert b.r1_est == 0.0
    assert "fails to contract" in b.diagnostic


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10 ** 6), c=st.floats(-3, 3))
def test_convection_quadratic(unstable16, seed, c):
    ops = unstable16.ops
    z = random_solenoidal(ops.grid, np.random.default_rng(seed))
    base = nonlinear_term(ops, z)
    assert np.allclose(nonlinear_term(ops, c * z), c * c * base, atol=1e-12 * max(1, np.abs(base).max()))


def test_convection_bilinear_polarization(unstable16, rng):
    g = unstable16.grid
    a, b = random_solenoidal(g, rng), random_solenoidal(g, rng)
    B = lambda x, y: g.advect(x, y)
    lhs = B(a + b, a + b) - B(a, a) - B(b, b)
    assert np.allclose(lhs, B(a, b) + B(b, a))


def test_nonlinearity_constant_finite(unstable16):
    c = nonlinearity_constant(unstable16.ops, 4.0, 5, np.random.default_rng(0))
    assert 0 < c < np.inf


def test_pressure_of_gradient_source(unstable16):
    # for z = 0 and z_t = -grad phi the recovered pressure is phi (zero mean)
    ops = unstable16.ops
    g = ops.grid
    X, Y = g.cell_centers()
    phi = (np.cos(np.pi * X) * np.sin(np.pi * Y)).ravel()
    chi = recover_pressure(ops, np.zeros(g.n), -(g.grad @ phi))
    assert np.abs(chi - (phi - phi.mean())).max() < 1e-9
