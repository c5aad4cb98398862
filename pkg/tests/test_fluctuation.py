import math

import numpy as np
import pytest

from bpdl import ou1d
from bpdl.errors import AlignmentError, EstimatorError, NumericalInstabilityError, PreconditionError
from bpdl.fluctuation import (TestFunctionSet, empirical_covariance, fluctuation_path, gaussianity_diagnostics,
                              initial_covariance, jackknife_variance_se, limit_covariance, lyapunov_integrate,
                              martingale_path, operator_A, operator_Q)
from bpdl.ibm_sim import InitialCondition, simulate
from bpdl.meanfield import TraitGrid, initial_density, integrate
from bpdl.model import ScalarField

from conftest import bump_model, logistic_model


def test_scalar_lyapunov_closed_form():
    a, q = -0.7, 1.3
    states = lyapunov_integrate([[0.0]], [[a]], [[q]], 3.0, 0.01, [1.0, 3.0])
    for s in states:
        exact = q / (-2 * a) * (1 - math.exp(2 * a * s.time))
        assert s.K[0, 0] == pytest.approx(exact, abs=1e-8)


def test_matrix_lyapunov_steady_state():
    from scipy.linalg import solve_continuous_lyapunov
    A = np.array([[-1.0, 0.3], [0.2, -0.5]])
    Q = np.array([[1.0, 0.1], [0.1, 0.4]])
    K = lyapunov_integrate(np.zeros((2, 2)), A, Q, 40.0, 0.02)[-1].K
    assert np.allclose(K, solve_continuous_lyapunov(A, -Q), atol=1e-9)


def test_lyapunov_rejects_asymmetric_or_indefinite():
    with pytest.raises(PreconditionError):
        lyapunov_integrate([[0.0, 1.0], [0.0, 0.0]], np.eye(2), np.eye(2), 1.0, 0.1)
    with pytest.raises(NumericalInstabilityError):
        lyapunov_integrate([[-1.0]], [[0.0]], [[0.0]], 1.0, 0.1)


def test_limit_covariance_matches_ou_variance():
    spec = logistic_model()
    init = InitialCondition(0.5, "point", (0.5,))
    one = TestFunctionSet((ScalarField.constant(1.0),), ("one",))
    ts = [1.0, 4.0, 10.0]
    lc = limit_covariance(spec, init, TraitGrid(spec.space, 17), one, ts, 0.01, "quantized")
    V = ou1d.variance(ou1d.OUParams(2.0, 1.0, 1.0, 0.5), ts)
    assert np.max(np.abs(lc.K[:, 0, 0] - V)) <= 1e-6


def test_operators_shapes_and_noise_psd(bump):
    grid = TraitGrid(bump.space, 33)
    u = initial_density(bump, InitialCondition(0.8), grid)
    A = operator_A(u, bump, grid)
    Q = operator_Q(u, bump, grid)
    assert A.shape == Q.shape == (33, 33)
    assert np.all(np.diag(Q) >= 0) and np.allclose(Q, np.diag(np.diag(Q)))
    # total noise equals the local event rate: births plus deaths
    x = grid.points
    w = grid.weights * u.values
    rate = bump.birth(x) + bump.death(x) + bump.competition(x, x, 1) @ w
    assert np.trace(Q) == pytest.approx(w @ rate, rel=1e-12)


def test_iid_initial_covariance_by_simulation():
    # covariance of sqrt(n)(<X^n_0, phi> - <X_0, phi>) for iid atoms on grid nodes
    spec = bump_model()
    grid = TraitGrid(spec.space, 9)
    u0 = initial_density(spec, InitialCondition(0.8), grid)
    m = grid.weights * u0.values
    K0 = initial_covariance(u0, "iid")
    Phi = np.stack([np.ones(9), grid.points[:, 0], grid.points[:, 0] ** 2], axis=1)
    theo = Phi.T @ K0 @ Phi
    n = 500
    N = int(round(n * 0.8))
    rng = np.random.default_rng(1)
    counts = rng.multinomial(N, m / m.sum(), size=20000)
    Y = math.sqrt(n) * (counts @ Phi / n - m @ Phi)
    emp = np.cov(Y.T)
    assert np.allclose(emp, theo, atol=0.02)
    assert np.allclose(initial_covariance(u0, "quantized"), 0)


def test_jackknife_closed_form_matches_brute_force(rng):
    X = rng.standard_normal((40, 3)) @ np.array([[1, 0.3, 0], [0, 1, 0.2], [0, 0, 0.5]])
    est = empirical_covariance(X)
    loo = np.stack([np.cov(np.delete(X, i, 0).T) for i in range(40)])
    se = np.sqrt(39 / 40 * np.sum((loo - loo.mean(0)) ** 2, axis=0))
    assert np.allclose(est.cov, np.cov(X.T))
    assert np.allclose(est.se, se)
    v, s = jackknife_variance_se(X[:, 0])
    assert v == pytest.approx(np.var(X[:, 0], ddof=1)) and s == pytest.approx(se[0, 0])


def test_estimator_needs_two_replicas():
    with pytest.raises(EstimatorError):
        empirical_covariance(np.ones((1, 2)))


def test_gaussianity_flags_degenerate():
    out = gaussianity_diagnostics(np.ones(200))
    assert out["degenerate"]
    with pytest.raises(EstimatorError):
        gaussianity_diagnostics(np.ones(10))


def test_gaussianity_on_normal_sample(rng):
    out = gaussianity_diagnostics(rng.standard_normal(2000), n_boot=199, rng=rng)
    assert abs(out["skewness"]) < 0.2 and abs(out["excess_kurtosis"]) < 0.4
    assert out["p_ks"] > 0.001


def test_martingale_reconstruction_and_bracket(bump):
    spec = bump.with_scale(300)
    tests = TestFunctionSet.default()
    grid = TraitGrid(spec.space, 65)
    init = InitialCondition(0.5)
    mf = integrate(initial_density(spec, init, grid), spec, 2.0, 0.01, np.linspace(0, 2, 201))
    sim = simulate(spec, init, 2.0, tests, [0.0, 1.0, 2.0], np.random.default_rng(0))
    res = martingale_path(sim, mf, spec, tests)
    assert res.reconstruction_error < 1e-10
    assert np.all(res.bracket[0] == 0) and np.all(np.diff(res.bracket, axis=0) >= 0)
    assert np.all(res.compensator[-1] > 0)
    # the "one" bracket counts events: jumps of size 1/sqrt(n) squared
    assert res.bracket[-1, 0] == pytest.approx(sim.events / 300)


def test_fluctuation_path_alignment(bump):
    spec = bump.with_scale(100)
    tests = TestFunctionSet.default()
    grid = TraitGrid(spec.space, 33)
    mf = integrate(initial_density(spec, InitialCondition(0.5), grid), spec, 1.0, None, [0.0, 0.5, 1.0])
    a = simulate(spec, InitialCondition(0.5), 1.0, tests, [0.0, 0.5, 1.0], np.random.default_rng(0))
    fp = fluctuation_path([a.path], mf, 100, tests)
    assert fp.Y.shape == (1, 3, 4)
    assert np.allclose(fp.at(0.0), 10 * (a.path.values[0] - mf.project(tests.evaluate(grid.points))[0]))
    b = simulate(spec, InitialCondition(0.5), 1.0, tests, [0.0, 1.0], np.random.default_rng(0))
    with pytest.raises(AlignmentError):
        fluctuation_path([a.path, b.path], mf, 100, tests)


def test_default_test_functions():
    assert TestFunctionSet.default().names == ("one", "x", "x2", "bump")
    assert len(TestFunctionSet.default(2)) == 5
    assert TestFunctionSet.default().gram_condition(TraitGrid(bump_model().space, 65)) < 1e4
