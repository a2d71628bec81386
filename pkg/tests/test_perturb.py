import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from isoembed import perturb as P
from isoembed.decomp import CoefficientField, evaluate_b
from isoembed.errors import LedgerMismatch, ResolutionError
from isoembed.frame import make_directions, spiral_frame, strain_frame
from isoembed.grid import GridField, GridSpec, pullback

D2 = make_directions(2)
CODIM = {"spiral": 6, "strain": 3}


def surface(g, variant, eps=0.3):
    m = 2 + CODIM[variant]

    def fn(x, y):
        out = [x + 0 * y, y + 0 * x, eps * np.exp(-(x * x + y * y)) * np.cos(x)]
        return out + [0 * x * y] * (m - 3)
    return GridField.from_function(g, fn, "map")


def flat(g, variant):
    m = 2 + CODIM[variant]
    return GridField.from_function(g, lambda x, y: [x + 0 * y, y + 0 * x] + [0 * x * y] * (m - 2), "map")


def frames_for(f, variant):
    return spiral_frame(f, D2) if variant == "spiral" else strain_frame(f, pullback(f), D2)


def coeffs(g, amp=0.1, phase=0.0):
    x, y = g.dense_coords()
    A = np.stack([0.8 + amp * np.sin(x + k + phase) * np.cos(y - k) for k in range(3)])
    return CoefficientField(g, A, g.ball_mask())


def top_lambda(g, variant):
    return 1.0 / (20 * g.spacing * (2 if variant == "strain" else 1))


@pytest.fixture(scope="module", params=["spiral", "strain"])
def stage_setup(request):
    variant = request.param
    g = GridSpec.ball(2, 129, 1.0)
    f = surface(g, variant)
    fr = frames_for(f, variant)
    lam = top_lambda(g, variant)
    return variant, g, f, fr, lam


def test_resolution_rule():
    P.check_resolution(0.01, 5.0, "spiral")
    with pytest.raises(ResolutionError):
        P.check_resolution(0.01, 5.1, "spiral")
    with pytest.raises(ResolutionError):
        P.check_resolution(0.01, 3.0, "strain")


def test_phases_are_relative_to_center():
    g = GridSpec.ball(2, 5, 1.0, center=(10.0, -3.0))
    th = P.phases(g, D2, 2.0)
    assert th[:, 2, 2] == pytest.approx([0, 0, 0], abs=1e-15)
    assert th[0, 4, 2] == pytest.approx(2.0)


@pytest.mark.parametrize("variant", ["spiral", "strain"])
def test_flat_map_gives_zero_tau(variant):
    g = GridSpec.ball(2, 65, 1.0)
    f = flat(g, variant)
    fr = frames_for(f, variant)
    tk, tkk, valid = (P.tau_tensors_spiral if variant == "spiral" else P.tau_tensors_strain)(
        f, fr, D2, top_lambda(g, variant), 0.01)
    assert valid.any()
    assert np.abs(tk).max() <= 1e-12
    assert np.abs(tkk).max() <= 1e-12


@pytest.mark.parametrize("variant", ["spiral", "strain"])
def test_tau_halves_when_frequency_doubles(variant):
    g = GridSpec.ball(2, 129, 1.0)
    f = surface(g, variant)
    fr = frames_for(f, variant)
    lam = top_lambda(g, variant)
    a = P.tau_tensors_spiral if variant == "spiral" else P.tau_tensors_strain
    t1 = a(f, fr, D2, lam / 2, 0.01)
    t2 = a(f, fr, D2, lam, 0.01)
    ratio = np.abs(t1[0]).max() / np.abs(t2[0]).max()
    assert ratio == pytest.approx(2.0, rel=0.2)


@pytest.mark.parametrize("variant", ["spiral", "strain"])
def test_zero_coefficients_give_zero(variant):
    g = GridSpec.ball(2, 65, 1.0)
    f = surface(g, variant)
    fr = frames_for(f, variant)
    A = CoefficientField(g, np.zeros((3,) + g.shape), g.ball_mask())
    build = P.build_spiral if variant == "spiral" else P.build_strain
    pert = build(A, fr, f, D2, top_lambda(g, variant), 0.01)
    assert np.all(pert.w.data == 0)
    led = P.ledger(f, A, fr, D2, top_lambda(g, variant), 0.01)
    for name, t in led.terms.items():
        assert np.abs(t).max() == 0.0, name


def test_spiral_single_direction_amplitude():
    g = GridSpec.ball(2, 201, 1.0)
    f = flat(g, "spiral")
    fr = frames_for(f, "spiral")
    A = np.zeros((3,) + g.shape)
    A[0] = 0.7
    lam, delta = 5.0, 0.04
    pert = P.build_spiral(CoefficientField(g, A, g.ball_mask()), fr, f, D2, lam, delta)
    mag = np.sqrt((pert.w.data ** 2).sum(axis=0))[pert.w.valid]
    # constant frames: |w| is exactly delta^(1/2) A / lam everywhere
    assert np.abs(mag - math.sqrt(delta) * 0.7 / lam).max() <= 1e-14
    c = pert.constants()
    assert 0.7 <= c["C1"] <= math.sqrt(2) * 0.7 * 1.001 + 0.7 / lam


def test_spiral_gradient_bounds_constant_frames():
    g = GridSpec.ball(2, 201, 1.0)
    f = flat(g, "spiral")
    fr = frames_for(f, "spiral")
    A = np.stack([np.full(g.shape, a) for a in (0.6, 0.7, 0.8)])
    lam, delta = 5.0, 0.04
    pert = P.build_spiral(CoefficientField(g, A, g.ball_mask()), fr, f, D2, lam, delta)
    from isoembed.grid import ck_seminorm
    d1 = ck_seminorm(pert.w, 1) / math.sqrt(delta)
    assert 0.6 <= d1 <= math.sqrt(2) * 0.8 * (1 + 1e-6)


def test_strain_channel_amplitudes():
    g = GridSpec.ball(2, 257, 1.0)
    f = flat(g, "strain")
    fr = frames_for(f, "strain")
    A = np.zeros((3,) + g.shape)
    A[1] = 0.9
    lam, delta = 3.0, 0.04
    pert = P.build_strain(CoefficientField(g, A, g.ball_mask()), fr, f, D2, lam, delta)
    v = pert.w.valid
    tangential = np.sqrt((pert.w.data[:2] ** 2).sum(axis=0))[v].max()
    normal = np.sqrt((pert.w.data[2:] ** 2).sum(axis=0))[v].max()
    assert tangential == pytest.approx(delta * 0.81 / (4 * lam), rel=1e-4)
    assert normal == pytest.approx(math.sqrt(delta) * math.sqrt(2) * 0.9 / lam, rel=1e-4)
    # the tangential channel points along n_1
    w = pert.w.data[:2, v]
    cross = np.abs(w[0] * D2.dirs[1][1] - w[1] * D2.dirs[1][0]).max()
    assert cross <= 1e-14


def test_tau_matches_ledger_b_part(stage_setup):
    variant, g, f, fr, lam = stage_setup
    A = coeffs(g).A
    geom = P.geometry(fr, f, D2, lam, 0.04)
    tk, tkk = P.tau_tensors(geom)
    dA, v = P.coefficient_gradient(A, g.spacing, geom.valid)
    terms, extra = P.ledger_terms(geom, A, dA)
    b1 = evaluate_b(A, D2.projectors(), tk, tkk)
    b2 = P._pack(P.b_part(terms, extra, variant))
    assert np.abs(b1 - b2)[:, v].max() <= 1e-12


def test_ledger_identities(stage_setup):
    variant, g, f, fr, lam = stage_setup
    led = P.ledger(f, coeffs(g), fr, D2, lam, 0.04)
    c = led.checks
    assert c["quadratic_identity"] <= 1e-10 * c["scale"]
    assert c["first_sum"] <= 1e-10 * c["scale"]
    if variant == "spiral":
        assert c["R6"] <= 1e-10 * c["scale"]
    else:
        assert c["R0"] <= 1e-10 * c["scale"]
        assert c["R7_identity"] <= 10 * c["R7_truncation"]


def test_master_identity_fourth_order():
    # fix the frequency, refine the grid: FD error of pullback(f + w) drops like h^4
    res = []
    for N in (129, 257):
        g = GridSpec.ball(2, N, 1.0)
        f = surface(g, "strain")
        fr = frames_for(f, "strain")
        led = P.ledger(f, coeffs(g), fr, D2, 3.0, 0.04)
        res.append(led.checks["master"] / led.checks["master_scale"])
    assert res[1] <= 1e-6
    assert math.log2(res[0] / res[1]) >= 3.5


def test_master_identity_at_resolution_limit(stage_setup):
    variant, g, f, fr, lam = stage_setup
    led = P.ledger(f, coeffs(g), fr, D2, lam, 0.04)
    # 4th-order error at 20 points per wavelength
    assert led.checks["master"] <= 1e-5 * led.checks["master_scale"]


def test_strain_cancellation_is_visible():
    g = GridSpec.ball(2, 129, 1.0)
    f = surface(g, "strain")
    fr = frames_for(f, "strain")
    lam = top_lambda(g, "strain")
    led = P.ledger(f, coeffs(g, amp=0.3), fr, D2, lam, 0.04)
    canc = led.norms["cancel"].norm0
    assert canc < 0.1 * min(led.norms["R6"].norm0, 2 * led.norms["R7"].norm0)


def test_ledger_mismatch_raises(stage_setup):
    variant, g, f, fr, lam = stage_setup
    led = P.ledger(f, coeffs(g), fr, D2, lam, 0.04)
    led.checks["quadratic_identity"] = 1.0
    with pytest.raises(LedgerMismatch):
        P.check_ledger(led)


def test_ledger_table_and_csv(tmp_path, stage_setup):
    variant, g, f, fr, lam = stage_setup
    led = P.ledger(f, coeffs(g), fr, D2, lam, 0.04)
    rows = led.table({"M": 1.0})
    names = [r["term"] for r in rows]
    assert "M" in names and "R6" in names
    m = next(r for r in rows if r["term"] == "M")
    assert m["ratio"] == pytest.approx(m["norm0"])
    assert m["norm1"] >= m["norm0"]
    path = tmp_path / "ledger.csv"
    P.write_ledger_csv(path, rows)
    assert path.read_text().splitlines()[0] == "term,norm0,norm1,bound,ratio"


def test_iterated_part_modes(stage_setup):
    variant, g, f, fr, lam = stage_setup
    A = coeffs(g).A
    geom = P.geometry(fr, f, D2, lam, 0.04)
    dA, v = P.coefficient_gradient(A, g.spacing, geom.valid)
    terms, extra = P.ledger_terms(geom, A, dA)
    full = P.iterated_part(terms, extra, variant, "full") + P.b_part(terms, extra, variant)
    assert np.abs(full - P.total_from(terms, variant))[:, :, v].max() <= 1e-13


@given(st.integers(0, 10_000), st.sampled_from(["spiral", "strain"]))
@settings(max_examples=10, deadline=None)
def test_identities_for_random_coefficients(seed, variant):
    rng = np.random.default_rng(seed)
    g = GridSpec.ball(2, 49, 1.0)
    f = surface(g, variant, eps=rng.uniform(0.05, 0.4))
    fr = frames_for(f, variant)
    x, y = g.dense_coords()
    k1, k2 = rng.normal(size=(2, 3)) * 2
    A = np.stack([rng.uniform(0.5, 1.0) + 0.2 * np.sin(k1[k] * x + k2[k] * y) for k in range(3)])
    led = P.ledger(f, CoefficientField(g, A, g.ball_mask()), fr, D2, top_lambda(g, variant),
                   rng.uniform(0.001, 0.2), check=False)
    c = led.checks
    assert c["quadratic_identity"] <= 1e-10 * c["scale"]
    key = "R6" if variant == "spiral" else "R0"
    assert c[key] <= 1e-10 * c["scale"]
