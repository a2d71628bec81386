import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from isoembed.errors import DomainExhaustedError, InsufficientDataError, ResolutionError
from isoembed.grid import GridField, GridSpec, sup_norm
from isoembed.mollify import (
    Kernel, fitted_order, kernel_constant, mollify, profile, verify_mollification_rates,
)


def grid2(N=129, R=1.0):
    return GridSpec.ball(2, N, R)


@pytest.mark.parametrize("n", [2, 3])
def test_kernel_constant_integrates_to_one(n):
    if n == 2:
        val = integrate.quad(lambda r: 2 * np.pi * r * (1 - r * r) ** 4, 0, 1)[0]
    else:
        val = integrate.quad(lambda r: 4 * np.pi * r * r * (1 - r * r) ** 4, 0, 1)[0]
    assert kernel_constant(n) * val == pytest.approx(1.0, rel=1e-12)


@pytest.mark.parametrize("n,ell", [(2, 0.05), (2, 0.2), (3, 0.1)])
def test_kernel_invariants(n, ell):
    k = Kernel.build(n, ell, 0.01 if n == 2 else 0.02)
    w = k.weights
    assert k.mass == pytest.approx(1.0, abs=1e-14)
    assert (w >= 0).all()
    assert np.array_equal(w, w[::-1]) and np.array_equal(w, np.flip(w, axis=-1))


def test_kernel_matches_continuous_profile():
    k = Kernel.build(2, 0.3, 0.01)
    p = k.half_width
    ax = np.arange(-p, p + 1) * 0.01 / 0.3
    X = np.stack(np.meshgrid(ax, ax, indexing="ij"))
    cont = profile(X, 2) * (0.01 / 0.3) ** 2
    assert np.abs(k.weights - cont).max() < 1e-3 * cont.max()


def test_mollify_constant_exact():
    f = GridField.from_function(grid2(), lambda x, y: 2.5 + 0 * x * y, "scalar")
    m = mollify(f, 0.1)
    assert np.abs(m.data[0][m.valid] - 2.5).max() < 1e-13
    assert m.grid.radius == pytest.approx(0.9)


@pytest.mark.parametrize("method", ["direct", "fft"])
def test_mollify_linear_reproduced(method):
    f = GridField.from_function(grid2(), lambda x, y: [3 * x - y + 1, 0.5 * y], "map")
    m = mollify(f, 0.1, method)
    assert np.abs(m.data - f.data)[:, m.valid].max() < 1e-12


def test_mollify_fft_matches_direct():
    f = GridField.from_function(grid2(), lambda x, y: [np.sin(7 * x) * np.cos(3 * y), np.exp(x)], "map")
    a = mollify(f, 0.08, "direct")
    b = mollify(f, 0.08, "fft")
    assert np.array_equal(a.valid, b.valid)
    assert np.abs(a.data - b.data).max() < 1e-12


def test_mollify_valid_region():
    g = grid2()
    f = GridField.from_function(g, lambda x, y: x * y, "scalar")
    m = mollify(f, 0.2)
    x, y = np.broadcast_arrays(*g.coords())
    r = np.hypot(x, y)
    assert m.valid[r <= 0.8 - 2 * g.spacing].all()
    assert not m.valid[r > 0.8 + 1e-12].any()


def test_mollify_errors():
    f = GridField.from_function(grid2(65), lambda x, y: x, "scalar")
    with pytest.raises(ResolutionError):
        mollify(f, 1.5 * f.grid.spacing)
    with pytest.raises(DomainExhaustedError):
        mollify(f, 1.0)


def test_mollify_sine_quadratic_rate():
    g = grid2(2049)
    f = GridField.from_function(g, lambda x, y: np.sin(50 * x) + 0 * y, "scalar")
    ells = [0.02, 0.01, 0.005]
    errs = []
    for e in ells:
        m = mollify(f, e)
        errs.append(np.abs(f.data - m.data)[:, m.valid].max())
    assert 3.5 < errs[0] / errs[1] < 4.5 and 3.5 < errs[1] / errs[2] < 4.5
    # leading term from the kernel second moment: (m2/2) * 2500 * |sin|
    k = Kernel.build(2, 0.005, g.spacing)
    assert errs[2] == pytest.approx(k.moment2() / 2 * 2500 * 2 / 2, rel=0.05)


@given(st.floats(-2, 2), st.floats(-2, 2))
@settings(max_examples=20, deadline=None)
def test_mollify_linear_in_field(a, b):
    g = grid2(65)
    f = GridField.from_function(g, lambda x, y: np.sin(5 * x + y), "scalar")
    h = GridField.from_function(g, lambda x, y: np.cos(3 * y) * x, "scalar")
    lhs = mollify(a * f + b * h, 0.1)
    rhs = a * mollify(f, 0.1) + b * mollify(h, 0.1)
    assert np.allclose(lhs.data, rhs.data, atol=1e-13, rtol=0)


@given(st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_mollify_sup_nonincreasing(seed):
    rng = np.random.default_rng(seed)
    g = grid2(65)
    f = GridField(g, rng.normal(size=(1,) + g.shape), "scalar")
    m = mollify(f, 0.1)
    assert sup_norm(m) <= sup_norm(f) + 1e-14


def test_mollify_symmetric_tensor_storage():
    g = grid2(65)
    f = GridField.from_function(g, lambda x, y: [1 + x, x * y, 2 + y], "sym-tensor")
    m = mollify(f, 0.1)
    M = m.matrix()
    assert np.array_equal(M, np.swapaxes(M, 0, 1))


def test_rates_constant_trivial():
    f = GridField.from_function(grid2(257), lambda x, y: 1.5 + 0 * x * y, "scalar")
    rep = verify_mollification_rates(f, f, [0.16, 0.08, 0.04])
    assert rep.ok


def test_rates_insufficient_scales():
    f = GridField.from_function(grid2(), lambda x, y: x, "scalar")
    with pytest.raises(InsufficientDataError):
        verify_mollification_rates(f, None, [0.1, 0.05])


def test_fitted_order_exact_power():
    ells = [0.1, 0.05, 0.025]
    assert fitted_order(ells, [3 * e ** 2 for e in ells]) == pytest.approx(2.0)


def test_rates_smooth_field_order_i_is_not_minus_one():
    # a fixed smooth field has bounded derivatives: order (i) near 0, not -1
    g = grid2(1025)
    f = GridField.from_function(g, lambda x, y: np.sin(40 * x) + 0 * y, "scalar")
    rep = verify_mollification_rates(f, None, [0.04, 0.02, 0.01, 0.005], items=("i", "iii"))
    assert abs(rep.orders["i"]) < 0.2
    assert rep.orders["iii"] == pytest.approx(2.0, abs=0.3)


@pytest.mark.parametrize("seed", range(50))
def test_commutator_random_band_limited(seed):
    rng = np.random.default_rng(seed)
    g = grid2(257)
    kf = rng.normal(size=(3, 2)) * 3
    kg = rng.normal(size=(3, 2)) * 3
    af, ag = rng.normal(size=3), rng.normal(size=3)
    f = GridField.from_function(g, lambda x, y: sum(a * np.sin(k[0] * x + k[1] * y + 1) for a, k in zip(af, kf)), "scalar")
    h = GridField.from_function(g, lambda x, y: sum(a * np.cos(k[0] * x + k[1] * y) for a, k in zip(ag, kg)), "scalar")
    rep = verify_mollification_rates(f, h, [0.12, 0.06, 0.03], alpha=1.0, items=("iii",))
    assert rep.orders["iii"] >= 1.7
