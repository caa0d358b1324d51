import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import M2P_L
from flowlab.errors import BetaTooSmall
from flowlab.flows import CylinderFunctional
from flowlab.pathsim import PathSample
from flowlab.revuz import (PcafSpec, Rectangle, SmoothMeasure, StochasticInterval,
                           classical_revuz_pairing, copotential, h_scaling_check,
                           measure_to_pcaf, optional_h_independence, optional_measure_exact,
                           optional_measure_mc, optional_measure_path, pcaf_to_measure, potential,
                           revuz_limit_check, revuz_pairing, u_beta_a, u_beta_a_h_route,
                           u_beta_a_mc, variational_residual, yosida_construction)
from flowlab.semigroup import engine_for
from flowlab.stopping import Hitting
from oracles import semigroup_integral

N = 100_000


def test_potential_examples(m1, m2p):
    np.testing.assert_allclose(potential(m1, [1.0], 2.0), [2 / 3])
    np.testing.assert_array_equal(potential(m2p, [0.0, 0.0], 2.0), [0.0, 0.0])
    np.testing.assert_allclose(potential(m2p, [1, 1], 2.0), [14 / 29, 9 / 29], atol=1e-15)
    with pytest.raises(BetaTooSmall):
        potential(m1, [1.0], 0.4)


def test_potentials_solve_the_variational_problem(m5):
    v = np.linspace(0.1, 1.0, 5)
    beta = m5.alpha
    assert variational_residual(m5, potential(m5, v, beta), v, beta) <= 1e-10
    assert variational_residual(m5, copotential(m5, v, beta), v, beta, adjoint=True) <= 1e-10


@pytest.mark.parametrize("shift", [0.0, 1.0])
def test_h_scaling(m2p_hs, shift):
    for ht in m2p_hs:
        assert h_scaling_check(ht, [1, 1], 2.0 + shift) <= 1e-9
        assert h_scaling_check(ht, [0, 0], 2.0 + shift) == 0.0


def test_u_beta_a_examples(m1, m2p, m2p_hs):
    np.testing.assert_allclose(u_beta_a(m1, [1.0], [1.0], 2.0), [2 / 3])
    np.testing.assert_array_equal(u_beta_a(m2p, [1, 1], [0, 0], 2.0), [0, 0])
    exact = u_beta_a(m2p, [1, 0], [1, 1], 2.0)
    np.testing.assert_allclose(exact, engine_for(m2p).resolvent(2.0) @ [1, 0])
    for j, ht in enumerate(m2p_hs):
        np.testing.assert_allclose(u_beta_a_h_route(ht, [1, 0], [1, 1], 2.0), exact, atol=1e-10)
        for x in (0, 1):
            est = u_beta_a_mc(ht, [1, 0], [1, 1], 2.0, x, N, seed=13, stream=j)
            assert est.censored_fraction == 0.0
            assert abs(est.estimate.z_against(exact[x])) <= 4


def test_conjugation_identity_random(m5):
    eng = engine_for(m5)
    from flowlab.htransform import build_h_transform
    rng = np.random.default_rng(2)
    v, f = rng.uniform(0, 1, (2, 5))
    for g in (np.ones(5), rng.uniform(0.1, 3, 5)):
        ht = build_h_transform(m5, eng.make_excessive(g, m5.alpha))
        for beta in (m5.alpha, m5.alpha + 2.5):
            np.testing.assert_allclose(u_beta_a_h_route(ht, v, f, beta), u_beta_a(m5, v, f, beta),
                                       atol=1e-10)


def test_revuz_scalar(m1):
    gamma, c = 1.0, 0.5
    t = revuz_limit_check(m1, [1.0], [1.0], [1.0], (1e2, 1e4, 1e6), gamma=gamma)
    for beta, value, target, _ in t.rows:
        assert abs(value - beta / (beta + gamma - c)) <= 1e-12
        assert target == 1.0
    assert t.rows[0][1] == pytest.approx(0.99502, abs=1e-5)
    assert t.passed


def test_revuz_zero_rate(m2p):
    g = engine_for(m2p).make_coexcessive([1, 1], 2.0)
    t = revuz_limit_check(m2p, [0, 0], [1, 1], g)
    assert all(r[1] == 0.0 for r in t.rows) and t.passed


def test_revuz_m2p(m2p):
    g = engine_for(m2p).make_coexcessive([1, 1], 2.0)
    t = revuz_limit_check(m2p, [1, 1], [1, 1], g)
    assert t.rows[0][2] == pytest.approx(23 / 29)
    assert t.passed
    assert t.errors[-1] / (23 / 29) <= 1e-4
    C = t.notes["constants"]
    assert max(C) / min(C) <= 1.5


@pytest.mark.parametrize("name", ["m1", "m2p", "m3", "m5"])
def test_revuz_error_constant_is_stable(name, request):
    b = request.getfixturevalue(name)
    n = b.n
    g = engine_for(b).make_coexcessive(np.ones(n), b.alpha + 0.5)
    v = np.linspace(0.2, 1.0, n)
    f = np.linspace(1.0, 2.0, n)
    t = revuz_limit_check(b, v, f, g)
    C = np.array(t.notes["constants"])
    assert t.passed
    assert np.all(np.abs(C / np.mean(C) - 1) <= 0.5)


def test_revuz_random_measure(m5):
    rng = np.random.default_rng(3)
    v = rng.uniform(0, 2, 5)
    f = rng.uniform(0, 1, 5)
    g = engine_for(m5).make_coexcessive(rng.uniform(0.5, 1, 5), m5.alpha)
    mu = pcaf_to_measure(PcafSpec(v), m5.weights)
    target = float(np.sum(f * g.g * mu.masses))
    val = revuz_pairing(m5, v, f, g.g, g.gamma, 1e6)
    assert abs(val - target) / target <= 1e-4


def test_classical_revuz_cross_check(m2p, m2p_hs):
    g = engine_for(m2p).make_coexcessive([1, 2], 2.5)
    v, f = np.array([0.4, 1.0]), np.array([2.0, 1.0])
    for beta in (1e2, 1e4, 1e6):
        direct = revuz_pairing(m2p, v, f, g.g, g.gamma, beta)
        for ht in m2p_hs:
            assert classical_revuz_pairing(ht, v, f, g.g, g.gamma, beta) == pytest.approx(direct, rel=1e-9)
    assert revuz_limit_check(m2p, v, f, g).passed


def test_measure_pcaf_round_trip():
    mu = SmoothMeasure.from_masses([1.0, 0.0], [1.0, 1.0])
    assert mu.total_mass == 1.0 and mu.masses.tolist() == [1.0, 0.0]
    back = pcaf_to_measure(measure_to_pcaf(mu), mu.m)
    assert np.array_equal(back.density, mu.density)
    assert measure_to_pcaf(SmoothMeasure([0.3, 0.7], [1, 1])).rate.tolist() == [0.3, 0.7]
    with pytest.raises(ValueError):
        SmoothMeasure([-1.0, 0.0], [1, 1])


def test_yosida_scalar(m1):
    rep = yosida_construction(m1, [1.0], 2.0, (3, 30))
    assert rep.g[3][0] == pytest.approx(2 / 3, abs=1e-15)
    assert rep.g[30][0] == pytest.approx(0.95238, abs=1e-5)
    for n, _, _, err in rep.table.rows:
        assert err == pytest.approx(1.5 / (n + 1.5), abs=1e-14)


def test_yosida_zero(m2p):
    rep = yosida_construction(m2p, [0, 0], 2.0)
    assert all(np.all(g == 0) for g in rep.g.values()) and rep.passed


def test_yosida_m2p(m2p):
    rep = yosida_construction(m2p, [1, 1], 2.0, (10, 20, 40, 80))
    assert 0.4 <= rep.ratio_last <= 0.6
    assert rep.monotone and rep.passed
    assert all(b < a for a, b in zip(rep.resolvent_residuals, rep.resolvent_residuals[1:]))
    assert len(rep.cesaro) == 4
    # error bound ||(n G_{n+beta} - I) v|| against the generator scale
    v = np.ones(2)
    bound = np.max(np.abs((m2p.generator - 2.0 * np.eye(2)) @ v))
    for n, _, _, err in rep.table.rows:
        assert err <= bound / n


def test_convergence_csv(m1):
    buf = io.StringIO()
    yosida_construction(m1, [1.0], 2.0, (3, 30)).table.write_csv(buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "beta_or_n,value,target,abs_error"
    assert len(lines) == 3


def test_optional_rectangle_scalar(m1, m1_h):
    val = optional_measure_exact(m1, [1.0], 0, Rectangle(0.0, 1.0))
    assert abs(val - 2 * (math.exp(0.5) - 1)) <= 1e-8
    assert val == pytest.approx(1.29744, abs=1e-5)
    assert optional_measure_exact(m1, [1.0], 0, Rectangle(0.7, 0.7)) == 0.0
    est = optional_measure_mc(m1_h, [1.0], 0, Rectangle(0.0, 1.0), N, seed=1)
    assert abs(est.estimate.z_against(val)) <= 4


def test_optional_rectangle_m2p(m2p, m2p_hs):
    want = semigroup_integral(M2P_L, [1, 1], 0.0, 1.0)[0]
    assert optional_measure_exact(m2p, [1, 1], 0, Rectangle(0.0, 1.0)) == pytest.approx(want, abs=1e-10)
    for j, ht in enumerate(m2p_hs):
        est = optional_measure_mc(ht, [1, 1], 0, Rectangle(0.0, 1.0), N, seed=2, stream=j)
        assert abs(est.estimate.z_against(want)) <= 4


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 2.0), st.floats(0.0, 2.0), st.floats(0.0, 2.0), st.integers(0, 4))
def test_optional_time_additivity(m5, s, a, b, x):
    v = np.linspace(0.5, 1.5, 5)
    t, r = s + a, s + a + b
    q = lambda lo, hi: optional_measure_exact(m5, v, x, Rectangle(lo, hi))  # noqa: E731
    assert q(s, t) + q(t, r) == pytest.approx(q(s, r), abs=1e-9)


def test_optional_rectangle_with_event(m2p, m2p_hs):
    ev = CylinderFunctional.indicator(0.3, [1], 2)
    win = Rectangle(0.5, 1.2, ev)
    exact = optional_measure_exact(m2p, [1, 0.5], 0, win)
    # closed-form oracle: Q_0.3(x, 2) * [e^{0.2L} int_0^0.7 e^{uL} v du](2)
    from oracles import eig_expm
    inner = semigroup_integral(M2P_L, [1, 0.5], 0.0, 0.7)
    want = eig_expm(M2P_L, 0.3)[0, 1] * (eig_expm(M2P_L, 0.2) @ inner)[1]
    assert exact == pytest.approx(want, abs=1e-10)
    for j, ht in enumerate(m2p_hs):
        est = optional_measure_mc(ht, [1, 0.5], 0, win, N, seed=5, stream=j)
        assert abs(est.estimate.z_against(exact)) <= 4
    with pytest.raises(ValueError):
        Rectangle(0.1, 1.0, ev)


def test_optional_until_hitting(m2p, m2p_hs):
    win = StochasticInterval(Hitting({1}))
    # occupation before reaching state 2 from state 1: (-L_11)^{-1} v_1 = 1/2
    assert optional_measure_exact(m2p, [1, 1], 0, win) == pytest.approx(0.5)
    assert optional_measure_exact(m2p, [1, 1], 1, win) == 0.0
    for j, ht in enumerate(m2p_hs):
        est = optional_measure_mc(ht, [1, 1], 0, win, N, seed=6, stream=j)
        assert est.censored_fraction < 1e-3
        assert abs(est.estimate.z_against(0.5)) <= 4


def test_optional_single_path(m2p_hs):
    ht = m2p_hs[1]  # h = 1, so the integrand is e^{2u} v(X_u)
    p = PathSample(0, [0.5], [0, 1], horizon=2.0, lifetime=1.0)
    val = optional_measure_path(ht, [1, 0], p, Rectangle(0.0, 1.0))
    assert val == pytest.approx((math.exp(1.0) - 1) / 2)
    live = PathSample(0, [0.5], [0, 1], horizon=0.8)
    from flowlab.errors import Censored
    with pytest.raises(Censored):
        optional_measure_path(ht, [1, 0], live, Rectangle(0.0, 1.0))


def test_optional_h_independence(m2p, m2p_hs):
    wins = [Rectangle(0.0, 1.0), Rectangle(0.5, 1.5), StochasticInterval(Hitting({1}))]
    rep = optional_h_independence(m2p, [1, 1], m2p_hs, wins, 0, N, seed=9)
    assert rep.exact_spread <= 1e-9 and rep.potential_spread <= 1e-9
    assert rep.passed
    single = optional_h_independence(m2p, [1, 1], m2p_hs[:1], wins[:1], 0, 1000, seed=9)
    assert single.passed and not single.z_scores
