import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from scipy import stats

from bpdl.bounds import (InitialMassLaw, bound_table, coupled_run, exp_bound_conditions, floor_A,
                         pure_birth_mass_sim, pure_birth_tail, tail_bound_exp, tail_bound_general)
from bpdl.errors import InapplicableBoundError, PreconditionError

from conftest import bump_model


def yule_tail(m0, s, n, A, rate=1.0):
    """Exact P(N_s > n A) for a Yule process: N_s - m0 is negative binomial."""
    return float(stats.nbinom.sf(math.floor(n * A) - m0, m0, math.exp(-rate * s)))


def test_floor_reading():
    assert floor_A(3.0) == 3 and floor_A(2.99) == 2 and floor_A(0.4) == 0


def test_initial_law():
    law = InitialMassLaw.from_mass(0.5, 50)
    assert law.probs == {25: 1.0}
    assert law.prob_mass_above(0.4, 50) == 1.0 and law.prob_mass_above(0.5, 50) == 0.0
    emp = InitialMassLaw.empirical([1, 1, 2, 4])
    assert emp.prob_eq(1) == 0.5 and emp.prob_eq(3) == 0.0


def test_exp_bound_conditions_and_value():
    c = exp_bound_conditions(0.5, 0.45, 50)
    assert c["size_condition"] and c["time_condition"]
    b = tail_bound_exp(0.5, 0.45, 50, 0.5, initial=0.5)
    assert b.value == pytest.approx(math.exp(-50 * 0.5 * 0.45))
    assert b.A == pytest.approx(2 * math.exp(0.95) - 2)


def test_exp_bound_inapplicable():
    with pytest.raises(InapplicableBoundError):
        tail_bound_exp(0.01, 0.01, 50, 0.5)
    with pytest.raises(PreconditionError):
        tail_bound_exp(0.5, 0.45, 50, 1.5)


def test_general_bound_preconditions_and_clamp():
    with pytest.raises(PreconditionError):
        tail_bound_general(3.0, 0.5, 10, j=3)
    with pytest.raises(PreconditionError):
        tail_bound_general(3.0, 0.5, 10)
    b = tail_bound_general(2.5, 5.0, 10, 0.5, 0.1)
    assert b.clamped and b.value == 1.0 and b.raw > 1.0


def test_initial_mass_above_j_counts_fully():
    b = tail_bound_general(6.0, 0.1, 20, 0.5, initial=5.0)
    assert b.value == 1.0


def test_yule_sampler_matches_negative_binomial(rng):
    m0, s = 3, 0.8
    draws = np.array([pure_birth_mass_sim(1.0, m0, s, rng) for _ in range(4000)]) - m0
    ks = np.arange(0, 12)
    obs = np.array([np.sum(draws == k) for k in ks] + [np.sum(draws >= 12)])
    p = np.append(stats.nbinom.pmf(ks, m0, math.exp(-s)), stats.nbinom.sf(11, m0, math.exp(-s)))
    assert stats.chisquare(obs, 4000 * p).pvalue > 1e-3


def test_pure_birth_tail_estimate(rng):
    p, se = pure_birth_tail(1.0, 5, 1.0, 0.3, 50, 3000, rng)
    assert abs(p - yule_tail(5, 1.0, 50, 0.3)) < 4 * se + 1e-3


@settings(max_examples=200, deadline=None)
@given(st.integers(10, 200), st.floats(0.1, 1.5), st.floats(0.05, 1.0), st.floats(0.3, 0.8), st.floats(0, 1))
def test_chernoff_form_dominates_exact_yule_tail(n, s, t, beta, frac):
    A = 2 * math.exp(s + t) - 2
    fa, j = floor_A(A), floor_A(beta * A)
    assume(fa >= 2 and 1 <= j < fa)
    m0 = max(1, int(frac * n * j))
    b = tail_bound_general(A, s, n, j=j, initial={m0: 1.0}, form="chernoff")
    assert b.raw >= yule_tail(m0, s, n, A) * (1 - 1e-9)


@settings(max_examples=100, deadline=None)
@given(st.integers(10, 200), st.floats(0.1, 1.5), st.floats(0.05, 1.0), st.floats(0.3, 0.8))
def test_displayed_form_holds_for_small_initial_mass(n, s, t, beta):
    A = 2 * math.exp(s + t) - 2
    fa, j = floor_A(A), floor_A(beta * A)
    assume(fa >= 2 and 1 <= j < fa)
    m0 = max(1, n // 2)
    b = tail_bound_general(A, s, n, j=j, initial={m0: 1.0})
    assert b.raw >= yule_tail(m0, s, n, A) * (1 - 1e-9)


def test_displayed_form_not_valid_near_capacity():
    # starting at n j particles, the displayed simplification drops below the true tail
    n, s, t, beta = 50, 1.0, 0.1, 0.5
    A = 2 * math.exp(s + t) - 2
    j = floor_A(beta * A)
    exact = yule_tail(n * j, s, n, A)
    shown = tail_bound_general(A, s, n, beta, {n * j: 1.0}).value
    careful = tail_bound_general(A, s, n, beta, {n * j: 1.0}, form="chernoff").value
    assert exact > 0.99 and shown < 1e-3 and careful == 1.0


def test_coupled_run_dominates(rng):
    spec = bump_model(n=50)
    for _ in range(10):
        run = coupled_run(spec, rng.random((25, 1)), 1.0, rng)
        assert run.dominated and run.yule[0] == run.bpdl[0] == 25
        assert np.all(np.diff(run.yule) >= 0)


def test_bound_table_rows():
    rows = bound_table([{"n": 50, "s": 0.5, "t": 0.45, "beta": 0.5}, {"n": 50, "s": 0.01, "t": 0.01, "beta": 0.5}],
                       initial_mass=0.5)
    assert rows[0]["applicable"] and rows[0]["general_bound"] <= 1.0
    assert not rows[1]["applicable"]
