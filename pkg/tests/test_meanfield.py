import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from bpdl.errors import AlignmentError, ConfigError, DivergenceError, PreconditionError
from bpdl.ibm_sim import InitialCondition
from bpdl.meanfield import (TraitGrid, discretize, dispersal_matrix, initial_density, integrate,
                            logistic_closed_form, weak_form_residual)
from bpdl.model import TraitSpace

from conftest import bump_model, logistic_model, planar_model


def gl_dispersal(spec, grid, Phi, order=20):
    """Dispersal of the hat interpolant by per-cell Gauss-Legendre, written independently."""
    x = grid.axes[0]
    gx, gw = np.polynomial.legendre.leggauss(order)
    s = spec.dispersal.scale
    out = np.zeros_like(Phi)
    for q, xq in enumerate(x):
        num = np.zeros(Phi.shape[1])
        den = 0.0
        for c in range(len(x) - 1):
            a, b = x[c], x[c + 1]
            if spec.dispersal.family == "uniform_ball":
                a, b = max(a, xq - s), min(b, xq + s)
                if b <= a:
                    continue
            z = 0.5 * (a + b) + 0.5 * (b - a) * gx
            w = 0.5 * (b - a) * gw
            if spec.dispersal.family == "truncated_gaussian":
                k = stats.norm.pdf(z, xq, s)
            else:
                k = np.full_like(z, 0.5 / s)
            t = (z - x[c]) / (x[c + 1] - x[c])
            vals = np.outer(1 - t, Phi[c]) + np.outer(t, Phi[c + 1])
            num += (w * k) @ vals
            den += np.sum(w * k)
        out[q] = num / den
    return out


@pytest.mark.parametrize("family,scale", [("truncated_gaussian", 0.1), ("uniform_ball", 0.13)])
def test_dispersal_matrix_against_quadrature(family, scale):
    spec = bump_model(family=family, scale=scale)
    grid = TraitGrid(spec.space, 65)
    P = dispersal_matrix(spec, grid)
    Phi = np.eye(grid.size)
    assert np.max(np.abs(P - gl_dispersal(spec, grid, Phi))) < 1e-12


@settings(max_examples=25, deadline=None)
@given(st.floats(0.02, 0.4), st.integers(5, 80), st.sampled_from(["truncated_gaussian", "uniform_ball"]))
def test_dispersal_matrix_stochastic(scale, nodes, family):
    spec = bump_model(family=family, scale=scale)
    grid = TraitGrid(spec.space, nodes)
    P = dispersal_matrix(spec, grid)
    assert np.all(P >= 0)
    assert np.allclose(P.sum(axis=1), 1.0, atol=1e-13)


def test_planar_matrix_is_kronecker():
    spec = planar_model()
    grid = TraitGrid(spec.space, 9)
    P = dispersal_matrix(spec, grid)
    P1 = dispersal_matrix(bump_model(scale=spec.dispersal.scale), TraitGrid(TraitSpace((0.0,), (1.0,)), 9))
    assert np.allclose(P, np.kron(P1, P1))


@pytest.mark.parametrize("family,scale", [("truncated_gaussian", 0.1), ("uniform_ball", 0.13)])
def test_weak_form_residual_random_tests(family, scale):
    spec = bump_model(family=family, scale=scale)
    grid = TraitGrid(spec.space, 129)
    u0 = initial_density(spec, InitialCondition(0.5), grid)
    path = integrate(u0, spec, 2.0, 0.005, np.linspace(0, 2, 401))
    rng = np.random.default_rng(0)
    x = grid.points[:, 0]
    Phi = np.stack([sum(rng.standard_normal() / (1 + k) * np.cos(k * math.pi * x) for k in range(6))
                    for _ in range(6)], axis=1)
    res = weak_form_residual(path, spec, Phi, lambda F: gl_dispersal(spec, grid, F))
    assert np.abs(res).max() <= 1e-8


def test_grid_discretization_error_is_second_order():
    # the grid generator approximates the continuum one at O(h^2)
    spec = bump_model()
    phi = lambda z: np.cos(3 * z)
    errs = []
    for nodes in (33, 65, 129):
        grid = TraitGrid(spec.space, nodes)
        x = grid.points[:, 0]
        approx = discretize(spec, grid).disperse(phi(x))
        exact = spec.dispersal.expectation(lambda p: phi(p[:, 0]), grid.points, spec.space, 96)
        errs.append(np.max(np.abs(approx - exact)))
    assert 3.0 < errs[0] / errs[1] < 5.0 and 3.0 < errs[1] / errs[2] < 5.0


def test_rk4_self_convergence():
    spec = bump_model()
    grid = TraitGrid(spec.space, 129)
    u0 = initial_density(spec, InitialCondition(0.5), grid)
    finals = [integrate(u0, spec, 3.0, dt, [3.0]).values[-1] for dt in (0.016, 0.008, 0.004)]
    e1 = np.max(np.abs(finals[0] - finals[1]))
    e2 = np.max(np.abs(finals[1] - finals[2]))
    assert 12 <= e1 / e2 <= 20


def test_degenerate_mass_matches_logistic():
    spec = logistic_model()
    grid = TraitGrid(spec.space, 9)
    u0 = initial_density(spec, InitialCondition(0.5, "point", (0.5,)), grid)
    ts = np.linspace(0, 10, 51)
    path = integrate(u0, spec, 10.0, None, ts)
    assert np.max(np.abs(path.mass - logistic_closed_form(0.5, 2, 1, 1, ts))) <= 1e-6


def test_logistic_closed_form_solves_ode():
    t = np.linspace(0, 5, 11)
    xi = logistic_closed_form(0.3, 2.0, 0.5, 0.7, t)
    h = 1e-6
    d = (logistic_closed_form(0.3, 2.0, 0.5, 0.7, t + h) - logistic_closed_form(0.3, 2.0, 0.5, 0.7, t - h)) / (2 * h)
    assert np.allclose(d, (1.5 - 0.7 * xi) * xi, atol=1e-7)


def test_point_mass_deposit_preserves_mass_and_mean():
    spec = bump_model()
    grid = TraitGrid(spec.space, 11)
    u0 = initial_density(spec, InitialCondition(2.0, "point", (0.437,)), grid)
    assert u0.mass == pytest.approx(2.0)
    assert u0.integrate(grid.points[:, 0]) == pytest.approx(2 * 0.437)


def test_stability_precheck():
    spec = bump_model()
    u0 = initial_density(spec, InitialCondition(0.5), TraitGrid(spec.space, 33))
    with pytest.raises(PreconditionError):
        integrate(u0, spec, 1.0, 0.2)


def test_divergence_guard(monkeypatch):
    # clipping keeps logistic RK4 bounded, so shrink the a-priori bound to trip the guard
    import bpdl.meanfield as mf
    monkeypatch.setattr(mf, "mass_bound", lambda spec, m0, T: 0.01)
    spec = logistic_model()
    u0 = initial_density(spec, InitialCondition(0.5, "point", (0.5,)), TraitGrid(spec.space, 5))
    with pytest.raises(DivergenceError):
        integrate(u0, spec, 5.0, 0.1)


def test_index_of_rejects_missing_time():
    spec = logistic_model()
    u0 = initial_density(spec, InitialCondition(0.5, "point", (0.5,)), TraitGrid(spec.space, 5))
    path = integrate(u0, spec, 1.0, None, [0.0, 0.5, 1.0])
    assert path.index_of([0.5]).tolist() == [1]
    with pytest.raises(AlignmentError):
        path.index_of([0.25])


def test_grid_limits():
    with pytest.raises(ConfigError):
        TraitGrid(TraitSpace((0.0,) * 3, (1.0,) * 3), 5)
    with pytest.raises(ConfigError):
        TraitGrid(TraitSpace((0.0,), (1.0,)), 1)
