import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import M2P_L
from flowlab.errors import Censored, NotSolvable
from flowlab.flows import CylinderFunctional, FlowQuery, flow_mc
from flowlab.htransform import build_h_transform
from flowlab.model import make_bundle
from flowlab.pathsim import PathSample, RngStream, sample_paths
from flowlab.semigroup import engine_for
from flowlab.stopping import (Constant, ConstantFunctional, Entrance, HeavyTailWarning, Hitting,
                              Min, ShiftedSum, TerminalValue, dirichlet_residual, evaluate,
                              evaluate_batch, expanded_flow_mc, finite_second_moment,
                              first_passage_exact, first_passage_h_route, is_solvable,
                              strong_markov_check)
from oracles import dirichlet, mp_expm_ones

N = 100_000


def path_07():
    return PathSample(0, [0.7], [0, 1], horizon=5.0)


def test_evaluate_examples():
    p = path_07()
    assert evaluate(Constant(1.0), p) == 1.0
    assert evaluate(Hitting({1}), p) == 0.7
    assert evaluate(ShiftedSum(Hitting({1}), Constant(0.3)), p) == pytest.approx(1.0)
    assert evaluate(Entrance({0}), p) == 0.0
    assert evaluate(Min(Hitting({1}), Constant(0.5)), p) == 0.5


def test_truncation_and_censoring():
    killed = PathSample(0, [0.7], [0, 1], horizon=5.0, lifetime=1.5)
    assert evaluate(Constant(2.0), killed) == math.inf
    assert evaluate(Constant(1.0), killed) == 1.0
    back = ShiftedSum(Hitting({1}), Hitting({0}))
    assert evaluate(Hitting({0}), killed) == 0.0
    assert evaluate(back, killed) == math.inf
    with pytest.raises(Censored):
        evaluate(back, path_07())
    with pytest.raises(Censored):
        evaluate(Constant(6.0), path_07())
    # the min is resolved even though one branch is censored
    assert evaluate(Min(back, Constant(2.0)), path_07()) == 2.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.floats(0.0, 2.0))
def test_lifetime_truncation_law(m2p_hs, seed, u):
    b = sample_paths(m2p_hs[0], 0, 20.0, 500, RngStream(seed))
    spec = ShiftedSum(Hitting({1}), Constant(u))
    raw, c_raw = evaluate_batch(spec, b, truncate=False)
    got, cens = evaluate_batch(spec, b)
    ok = ~cens & ~c_raw
    assert np.array_equal(np.isinf(got[ok]), (raw >= b.lifetime)[ok] | np.isinf(raw[ok]))


def test_first_passage_examples(m2p, m3):
    assert first_passage_exact(m2p, {1}, [0, 1])[0] == pytest.approx(1.5, abs=1e-15)
    assert first_passage_exact(m2p, {1}, [0, 0])[0] == 0.0
    assert first_passage_exact(m3, {1}, [0, 1])[0] == pytest.approx(1.0, abs=1e-15)


def test_first_passage_against_oracle(m5):
    f = np.array([0.0, 2.0, 0.0, 1.0, 0.0])
    B = {1, 3}
    w = first_passage_exact(m5, B, f)
    np.testing.assert_allclose(w, dirichlet(m5.generator.tolist(), B, f), atol=1e-12)
    assert dirichlet_residual(m5, B, w) <= 1e-9


def test_first_passage_is_h_free(m2p, m2p_hs):
    for ht in m2p_hs:
        np.testing.assert_allclose(first_passage_h_route(ht, {1}, [0, 1]),
                                   first_passage_exact(m2p, {1}, [0, 1]), atol=1e-13)


def test_not_solvable():
    b = make_bundle([[0.5, 1.0], [1.0, -1.0]], [1, 1], 3.0)
    assert not is_solvable(b, {1})
    with pytest.raises(NotSolvable):
        first_passage_exact(b, {1}, [0, 1])
    ht = build_h_transform(b, engine_for(b).make_excessive([1, 1], 3.0))
    with pytest.warns(HeavyTailWarning):
        expanded_flow_mc(ht, 0, Hitting({1}), n_paths=100, seed=0)


def test_second_moment_flag(m2p):
    # s(L off {2}) = -2 = -alpha: the weights have a Pareto tail of index 2
    assert is_solvable(m2p, {1})
    assert not finite_second_moment(m2p, {1})


def test_expanded_flow_examples(m2p_hs, m3_hs):
    for j, ht in enumerate(m2p_hs):
        e = expanded_flow_mc(ht, 0, Hitting({1}), n_paths=N, seed=21, stream=j)
        assert abs(e.estimate.z_against(1.5)) <= 4
        assert e.censored_fraction < 1e-3
    e3 = expanded_flow_mc(m3_hs[0], 0, Hitting({1}), n_paths=N, seed=21)
    assert abs(e3.estimate.z_against(1.0)) <= 4


def test_expanded_flow_terminal_value(m2p, m2p_hs):
    f = np.array([0.0, 2.5])
    w = first_passage_exact(m2p, {1}, f)
    e = expanded_flow_mc(m2p_hs[1], 0, Hitting({1}), TerminalValue(f), n_paths=N, seed=8)
    assert abs(e.estimate.z_against(w[0])) <= 4


def test_constant_stop_reproduces_flow(m2p_hs):
    ht = m2p_hs[0]
    q = FlowQuery(0, CylinderFunctional([0.5], [np.ones(2)]))
    a = flow_mc(ht, q, 20_000, seed=5)
    b = expanded_flow_mc(ht, 0, Constant(0.5), q.functional, n_paths=20_000, seed=5)
    assert a.mean == b.estimate.mean and a.std_error == b.estimate.std_error


def test_strong_markov_example(m2p_hs):
    anchor = 1.5 * mp_expm_ones(M2P_L, 1.0)[1]
    for ht in m2p_hs:
        r = strong_markov_check(ht, 0, Hitting({1}), 1.0, n_paths=N, seed=31)
        assert r.exact == pytest.approx(anchor, abs=1e-13)
        assert r.passed
        assert abs(r.rhs.estimate.z_against(anchor)) <= 4


def test_strong_markov_constant_times(m2p, m2p_hs):
    r = strong_markov_check(m2p_hs[0], 0, Constant(0.5), Constant(0.5), n_paths=N, seed=3)
    assert r.exact == pytest.approx(mp_expm_ones(M2P_L, 1.0)[0], abs=1e-12)
    assert abs(r.lhs.estimate.z_against(r.exact)) <= 4 and r.passed


def test_strong_markov_zero_functional(m2p_hs):
    r = strong_markov_check(m2p_hs[0], 0, Hitting({1}), 1.0, Y=ConstantFunctional(0.0),
                            n_paths=5000, seed=1)
    assert r.lhs.mean == 0.0 and r.rhs.mean == 0.0 and r.exact == 0.0
