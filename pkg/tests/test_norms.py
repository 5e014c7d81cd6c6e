import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from oseenstab.norms import (
    GateError, NormSuite, StokesBasis, besov_surrogate, field_lq, index_gate, lq_norm,
    maxreg_constant, smooth_patterns, time_lp, w2q_norm)
from oseenstab.operators import random_solenoidal

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


@pytest.fixture(scope="module")
def basis16(stokes16):
    return StokesBasis(stokes16)


def test_gate_accepts_tight_index():
    index_gate(4, 9 / 8, 2)
    NormSuite(q=3, p=1.1, d=2)


@pytest.mark.parametrize("q,p,d,msg", [
    (2, 1.1, 2, "q > d"),
    (4, 1.0, 2, "p > 1"),
    (4, 1.2, 2, "p < 2q/(2q-1)"),
    (3, 1.5, 3, "q > d"),
])
def test_gate_violations(q, p, d, msg):
    with pytest.raises(GateError, match=msg.replace("(", r"\(").replace(")", r"\)")):
        index_gate(q, p, d)


def test_gate_message_names_bound():
    with pytest.raises(GateError) as exc:
        NormSuite(q=4, p=1.2)
    assert "2q/(2q-1)=8/7" in str(exc.value)


@settings(max_examples=50, deadline=None)
@given(f=arrays(float, 20, elements=finite), c=finite, q=st.floats(1.0, 8.0))
def test_lq_homogeneous(f, c, q):
    assert lq_norm(c * f, q) == pytest.approx(abs(c) * lq_norm(f, q), rel=1e-9, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(f=arrays(float, 20, elements=finite), g=arrays(float, 20, elements=finite), q=st.floats(1.0, 8.0))
def test_lq_triangle(f, g, q):
    assert lq_norm(f + g, q) <= lq_norm(f, q) + lq_norm(g, q) + 1e-9 * (1 + lq_norm(f, q) + lq_norm(g, q))


@settings(max_examples=50, deadline=None)
@given(f=arrays(float, 20, elements=st.floats(-10, 10)), g=arrays(float, 20, elements=st.floats(-10, 10)),
       q=st.floats(1.1, 6.0))
def test_holder(f, g, q):
    qp = q / (q - 1)
    assert np.sum(np.abs(f * g)) <= lq_norm(f, q) * lq_norm(g, qp) * (1 + 1e-9) + 1e-12


def test_vector_magnitude():
    f = np.zeros((2, 3, 3))
    f[0, 0, 0], f[1, 0, 0] = 3.0, 4.0
    assert lq_norm(f, 2) == pytest.approx(5.0)
    assert lq_norm(f, np.inf) == pytest.approx(5.0)


def test_time_lp_constant():
    t = np.linspace(0, 2, 101)
    assert time_lp(np.full(101, 3.0), t, 1.5) == pytest.approx(3.0 * 2 ** (1 / 1.5))


def test_besov_sandwich(stokes16, basis16):
    # L^q norm <= c * interpolation norm <= C * W^{2,q} norm, up to mesh-independent constants
    g = stokes16.grid
    suite = NormSuite(q=4, p=9 / 8, h=1 / 16)
    rng = np.random.default_rng(3)
    ratios_lo, ratios_hi = [], []
    for _ in range(4):
        z = random_solenoidal(g, rng)
        b = besov_surrogate(z, suite, basis16)
        ratios_lo.append(b / field_lq(g, z, 4))
        ratios_hi.append(b / w2q_norm(g, z, 4))
    assert min(ratios_lo) > 0.1
    assert max(ratios_hi) < 10


@settings(max_examples=10, deadline=None)
@given(c=st.floats(0.01, 100.0), seed=st.integers(0, 1000))
def test_besov_homogeneous(stokes16, basis16, c, seed):
    z = random_solenoidal(stokes16.grid, np.random.default_rng(seed))
    suite = NormSuite(q=4, p=9 / 8, h=1 / 16)
    assert besov_surrogate(c * z, suite, basis16) == pytest.approx(c * besov_surrogate(z, suite, basis16),
                                                                   rel=1e-8)


def test_besov_q2_path(stokes16, basis16, rng):
    z = random_solenoidal(stokes16.grid, rng)
    val = besov_surrogate(z, NormSuite(q=2, p=1.2, h=1 / 16, gate=False), basis16)
    assert np.isfinite(val) and val > 0


def test_besov_needs_basis(rng, stokes16):
    with pytest.raises(ValueError):
        besov_surrogate(random_solenoidal(stokes16.grid, rng), NormSuite(), None)


def test_scalar_maxreg_bound():
    # for eta' = -eta + f both |eta'| and |eta| are bounded by |f| in L^p, so the constant is at most 2
    C = maxreg_constant(np.array([[-1.0]]), NormSuite(q=2.5, p=1.2), n_samples=20, T=20, dt=0.01,
                        patterns=np.ones((1, 1)))
    assert 0 < C <= 2.0 + 1e-6


def test_maxreg_closed_loop_finite(unstable16):
    g = unstable16.grid
    rng = np.random.default_rng(1)
    pats = smooth_patterns(unstable16.ops, rng)
    Q = unstable16.ops.Q
    C = maxreg_constant(unstable16.closed.AF.real, NormSuite(q=4, p=9 / 8, h=1 / 16), n_samples=3, T=5,
                        dt=0.05, rng=rng, spatial_norm=lambda x: field_lq(g, Q @ x, 4), patterns=pats)
    assert 1.0 < C < 10.0


def test_stokes_modes_orthonormal(basis16):
    V = basis16.V
    assert np.allclose(V.T @ V, np.eye(V.shape[1]), atol=1e-10)
    assert np.all(np.diff(basis16.mu) >= -1e-10)
