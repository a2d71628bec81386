import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import brute_force_root, decomposition_residual
from isoembed.decomp import (
    baseline_solve, decompose_field, evaluate_b, guard_value, identity_packed, jacobian,
    newton_decompose,
)
from isoembed.errors import ConeBoundaryError, GuardViolation, SolverFailure
from isoembed.frame import make_directions
from isoembed.grid import GridSpec, full_to_sym, sym_pairs

D2 = make_directions(2)
D3 = make_directions(3)


def pack(M):
    return np.array([M[i, j] for i, j in sym_pairs(M.shape[0])])


def random_problem(rng, dirs, size=0.01):
    n, K = dirs.n, dirs.K
    sym = lambda: (lambda B: B + B.T)(rng.normal(size=(n, n))) * size / 2
    tau = np.eye(n) + sym() * 2
    tau_k = [sym() for _ in range(K)]
    tau_kk = [[sym() * 0.5 for _ in range(K)] for _ in range(K)]
    return tau, tau_k, tau_kk


def packed(tau, tau_k, tau_kk):
    K = len(tau_k)
    return (pack(tau), np.stack([pack(t) for t in tau_k]),
            np.stack([np.stack([pack(tau_kk[k][l]) for l in range(K)]) for k in range(K)]))


def test_baseline_identity_2d():
    A = baseline_solve(identity_packed(2), D2)
    assert np.allclose(A, np.sqrt(2 / 3), atol=1e-12)


def test_baseline_homogeneous():
    A = baseline_solve(1.21 * identity_packed(2), D2)
    assert np.allclose(A, 1.1 * np.sqrt(2 / 3), atol=1e-12)


def test_baseline_identity_3d():
    A = baseline_solve(identity_packed(3), D3)
    assert np.allclose(A, np.sqrt(0.5), atol=1e-12)


def test_baseline_cone_boundary():
    n0 = D2.dirs[0]
    tau = pack(np.outer(n0, n0) + 1e-4 * np.eye(2))
    with pytest.raises(ConeBoundaryError):
        baseline_solve(tau, D2)


def test_newton_from_exact_seed():
    tau = identity_packed(2)
    seed = baseline_solve(tau, D2)
    res = newton_decompose(tau[:, None], None, None, D2, seed[:, None])
    assert res.iterations <= 1
    assert np.allclose(res.A[:, 0], seed, atol=1e-12)


def test_newton_spec_point_matches_brute_force():
    n1 = D2.dirs[1]
    tau = np.eye(2)
    tau_k = [0.01 * np.outer(n1, n1), np.zeros((2, 2)), np.zeros((2, 2))]
    tau_kk = [[np.zeros((2, 2))] * 3 for _ in range(3)]
    t, tk, tkk = packed(tau, tau_k, tau_kk)
    res = newton_decompose(t[:, None], tk[..., None], tkk[..., None], D2)
    A = res.A[:, 0]
    assert np.abs(decomposition_residual(A, D2, tau, tau_k, tau_kk)).max() <= 1e-12
    ref = brute_force_root(D2, tau, tau_k, tau_kk)
    assert np.abs(A - ref).max() <= 1e-8


@pytest.mark.parametrize("seed", range(10))
def test_newton_random_problems_match_brute_force(seed):
    rng = np.random.default_rng(100 + seed)
    tau, tau_k, tau_kk = random_problem(rng, D2)
    t, tk, tkk = packed(tau, tau_k, tau_kk)
    res = newton_decompose(t[:, None], tk[..., None], tkk[..., None], D2)
    ref = brute_force_root(D2, tau, tau_k, tau_kk)
    assert np.abs(res.A[:, 0] - ref).max() <= 1e-8


def test_newton_3d_residual():
    rng = np.random.default_rng(7)
    tau, tau_k, tau_kk = random_problem(rng, D3, size=0.004)
    t, tk, tkk = packed(tau, tau_k, tau_kk)
    res = newton_decompose(t[:, None], tk[..., None], tkk[..., None], D3)
    R = decomposition_residual(res.A[:, 0], D3, tau, tau_k, tau_kk)
    assert np.abs(R).max() <= 1e-10


@given(st.floats(0.5, 2.0), st.integers(0, 1000))
@settings(max_examples=25, deadline=None)
def test_newton_homogeneity(s, seed):
    rng = np.random.default_rng(seed)
    tau, tau_k, tau_kk = random_problem(rng, D2)
    t, tk, tkk = packed(tau, tau_k, tau_kk)
    a = newton_decompose(t[:, None], tk[..., None], tkk[..., None], D2).A[:, 0]
    b = newton_decompose(s * s * t[:, None], s * tk[..., None], tkk[..., None], D2).A[:, 0]
    assert np.abs(b - s * a).max() <= 1e-10


def test_newton_zero_perturbation_equals_baseline():
    rng = np.random.default_rng(3)
    taus = np.stack([pack(np.eye(2) + 0.05 * (lambda B: B + B.T)(rng.normal(size=(2, 2)))) for _ in range(20)], axis=1)
    seed = np.full((3, 20), 0.7)
    res = newton_decompose(taus, np.zeros((3, 3, 20)), np.zeros((3, 3, 3, 20)), D2, seed)
    assert np.abs(res.A - baseline_solve(taus, D2)).max() <= 1e-12


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_newton_residual_invariant(seed):
    rng = np.random.default_rng(seed)
    t = np.stack([packed(*random_problem(rng, D2))[0] for _ in range(5)], axis=-1)
    tk = rng.normal(size=(3, 3, 5)) * 0.005
    tkk = rng.normal(size=(3, 3, 3, 5)) * 0.002
    res = newton_decompose(t, tk, tkk, D2)
    G = evaluate_b(res.A, D2.projectors(), tk, tkk) - t
    assert np.abs(G).max() <= 1e-10 * max(1.0, np.abs(t).max())


def test_jacobian_matches_finite_differences():
    rng = np.random.default_rng(1)
    A = rng.uniform(0.6, 1.0, size=(3, 4))
    tk = rng.normal(size=(3, 3, 4)) * 0.1
    tkk = rng.normal(size=(3, 3, 3, 4)) * 0.1
    P = D2.projectors()
    J = jacobian(A, P, tk, tkk)
    eps = 1e-6
    for j in range(3):
        dA = np.zeros_like(A)
        dA[j] = eps
        fd = (evaluate_b(A + dA, P, tk, tkk) - evaluate_b(A - dA, P, tk, tkk)) / (2 * eps)
        assert np.abs(fd - J[:, j]).max() < 1e-8


def test_lipschitz_stability():
    rng = np.random.default_rng(5)
    tau, tau_k, tau_kk = random_problem(rng, D2)
    t, tk, tkk = packed(tau, tau_k, tau_kk)
    base = newton_decompose(t[:, None], tk[..., None], tkk[..., None], D2).A[:, 0]
    direction = pack((lambda B: B + B.T)(rng.normal(size=(2, 2))))
    direction /= np.abs(direction).max()
    ks = []
    for eta in (1e-3, 5e-4, 2.5e-4):
        a = newton_decompose((t + eta * direction)[:, None], tk[..., None], tkk[..., None], D2).A[:, 0]
        ks.append(np.abs(a - base).max() / eta)
    assert max(ks) / min(ks) < 1.01


def test_smooth_dependence_along_segment():
    rng = np.random.default_rng(9)
    tau, tau_k, tau_kk = random_problem(rng, D2)
    t, tk, tkk = packed(tau, tau_k, tau_kk)
    direction = pack(np.diag([0.1, -0.05]))
    s = np.linspace(0, 1, 41)
    ts = t[:, None] + direction[:, None] * s
    A = newton_decompose(ts, np.repeat(tk[..., None], 41, -1), np.repeat(tkk[..., None], 41, -1), D2).A
    second = np.abs(np.diff(A, 2, axis=1)).max() / (s[1] ** 2)
    assert second < 1.0


def test_guard_policy():
    tau = identity_packed(2)[:, None]
    tk = np.full((3, 3, 1), 0.2)
    with pytest.raises(GuardViolation):
        newton_decompose(tau, tk, None, D2)
    res = newton_decompose(tau, tk, None, D2, guard="off")
    assert res.guard[0] > 0.2


def test_guard_is_scale_invariant():
    rng = np.random.default_rng(2)
    t, tk, tkk = packed(*random_problem(rng, D2))
    g1 = guard_value(t[:, None], tk[..., None], tkk[..., None], 2)
    g2 = guard_value(0.04 * t[:, None], 0.2 * tk[..., None], tkk[..., None], 2)
    assert g1 == pytest.approx(g2, rel=1e-12)


def test_solver_failure_reports_point():
    # a tensor outside the reachable set: strongly negative definite
    tau = -identity_packed(2)[:, None]
    seed = np.full((3, 1), 0.8)
    with pytest.raises((SolverFailure, ConeBoundaryError)):
        newton_decompose(tau, np.zeros((3, 3, 1)), None, D2, seed, guard="off")


def test_decompose_field_constant_inputs():
    g = GridSpec.ball(2, 9, 1.0)
    rng = np.random.default_rng(4)
    t, tk, tkk = packed(*random_problem(rng, D2))
    shape = g.shape
    T = np.broadcast_to(t[:, None, None], (3,) + shape).copy()
    TK = np.broadcast_to(tk[..., None, None], tk.shape + shape).copy()
    TKK = np.broadcast_to(tkk[..., None, None], tkk.shape + shape).copy()
    valid = g.ball_mask()
    cf = decompose_field(T, TK, TKK, D2, g, valid)
    single = newton_decompose(t[:, None], tk[..., None], tkk[..., None], D2).A[:, 0]
    assert np.abs(cf.A[:, valid] - single[:, None]).max() <= 1e-13
    assert np.all(cf.A[:, ~valid] == 0)
    again = decompose_field(T, TK, TKK, D2, g, valid, warm=cf)
    assert np.array_equal(again.A, cf.A)


# damped Newton from the baseline stalls here; the positive root is unique
# (multistart bounded least squares, 30 starts)
HARD_TAU = np.array([0.311, -0.012, 0.316])
HARD_TK = np.array([[0.184, 0.9, 0.298], [-0.006, -0.032, -0.959], [-0.596, -1.292, 0.022]])
HARD_TKK = np.array([
    [[-0.012, -0.097, -0.053], [-0.023, 0.006, 0.061], [0.005, 0.035, -0.03]],
    [[-0.014, -0.002, 0.042], [0.036, 0.034, -0.022], [0.004, -0.022, -0.065]],
    [[-0.008, 0.022, -0.031], [-0.053, 0.006, 0.091], [-0.04, 0.066, -0.039]]])
HARD_ROOT = np.array([0.479299005, 1.107788719, 0.634176636])


def test_continuation_recovers_stalled_point():
    from isoembed.decomp import TOL, _damped
    P = D2.projectors()
    seed = baseline_solve(HARD_TAU[:, None], D2)
    _, res, _ = _damped(seed, HARD_TAU[:, None], HARD_TK[..., None], HARD_TKK[..., None], P,
                        0.05, np.array([TOL]), 50)
    assert res[0] > 1e-3
    r = newton_decompose(HARD_TAU[:, None], HARD_TK[..., None], HARD_TKK[..., None], D2,
                         guard="off")
    assert np.allclose(r.A[:, 0], HARD_ROOT, atol=1e-8)
