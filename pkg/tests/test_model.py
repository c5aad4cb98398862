import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from bpdl.errors import ConfigError, DomainError
from bpdl.model import (DispersalKernel, ModelSpec, ScalarField, SeparableKernel, TraitSpace, eval_alpha,
                        eval_birth, sample_dispersal, validate)

from conftest import bump_model, logistic_model, planar_model


def test_field_families_evaluate():
    x = np.array([[0.0], [0.25], [1.0]])
    assert np.allclose(ScalarField.constant(3.0)(x), 3.0)
    assert np.allclose(ScalarField.affine([2.0], 1.0)(x)[:, None], 1 + 2 * x)
    bump = ScalarField.gaussian_bump([0.25], 0.1, 2.0, 0.5)
    assert bump(x)[1] == pytest.approx(2.5)
    assert bump(x)[0] == pytest.approx(0.5 + 2 * math.exp(-0.25 ** 2 / 0.02))
    assert np.allclose(ScalarField.monomial([2], 3.0)(x)[:, None], 3 * x ** 2)
    interp = ScalarField.grid_interpolant([0.0, 1.0, 4.0], [0.0], [1.0])
    assert interp(np.array([[0.25], [0.75]])) == pytest.approx([0.5, 2.5])


def test_field_dict_round_trip():
    for f in (ScalarField.constant(1.5), ScalarField.affine([0.1, 0.2], 0.3),
              ScalarField.gaussian_bump([0.2, 0.4], 0.3, 1.0, 0.1), ScalarField.monomial([1, 2])):
        g = ScalarField.from_dict(f.to_dict())
        pts = np.random.default_rng(0).random((20, 2))
        assert np.array_equal(f(pts, 2), g(pts, 2))


def test_model_dict_round_trip(planar):
    other = ModelSpec.from_dict(planar.to_dict())
    assert other.to_dict() == planar.to_dict()


def test_unknown_family_rejected():
    with pytest.raises(ConfigError):
        ScalarField.from_dict({"family": "spline"})
    with pytest.raises(ConfigError):
        DispersalKernel("cauchy", 0.1)
    with pytest.raises(ConfigError):
        ScalarField.gaussian_bump([0.5], 0.0, 1.0)


def test_nonseparable_competition_rejected():
    d = logistic_model().to_dict()
    d["competition"] = {"family": "gaussian", "width": 0.1}
    with pytest.raises(ConfigError):
        ModelSpec.from_dict(d)


def test_point_outside_space(logistic):
    with pytest.raises(DomainError):
        eval_birth(logistic, [1.5])


def test_bounds_see_off_lattice_peak():
    # bump peak between lattice nodes still counts towards the sup
    spec = ModelSpec(TraitSpace((0.0,), (1.0,)), ScalarField.gaussian_bump([0.123456], 1e-3, 1.0, 1.0),
                     ScalarField.constant(0.5), SeparableKernel.constant(1.0), lattice_points=16)
    assert spec.b_bar == pytest.approx(2.0)


def test_validate_reports_witness():
    spec = ModelSpec(TraitSpace((0.0,), (1.0,)), ScalarField.affine([-2.0], 1.0), ScalarField.constant(0.1),
                     SeparableKernel.constant(1.0))
    rep = validate(spec)
    assert not rep.ok
    bad = rep["birth_positive"]
    assert bad.witness == [1.0]
    assert "birth_exceeds_death" in {c.name for c in rep.failures()}


def test_validate_accepts_test_models(logistic, bump, planar):
    for spec in (logistic, bump, planar):
        assert validate(spec).ok


def test_alpha_is_sum_of_products(planar):
    x, y = [0.2, 0.7], [0.9, 0.1]
    expected = 1.0 * (0.2 + 0.8 * math.exp(-((0.9 - 0.4) ** 2 + (0.1 - 0.6) ** 2) / (2 * 0.25 ** 2))) \
        + (0.5 * 0.2 + 0.2) * 0.5
    assert eval_alpha(planar, x, y) == pytest.approx(expected)


@pytest.mark.parametrize("x0", [0.0, 0.05, 0.5, 0.97])
def test_normalizer_matches_quadrature(x0):
    k = DispersalKernel("truncated_gaussian", 0.1)
    space = TraitSpace((0.0,), (1.0,))
    z, _ = integrate.quad(lambda u: math.exp(-u * u / 0.02) / math.sqrt(2 * math.pi * 0.01), -x0, 1 - x0,
                          epsabs=1e-13)
    assert float(k.normalizer([x0], space)[0]) == pytest.approx(z, rel=1e-10)


def test_density_integrates_to_one_near_boundary():
    k = DispersalKernel("uniform_ball", 0.2)
    space = TraitSpace((0.0,), (1.0,))
    val, _ = integrate.quad(lambda u: float(k.density([0.1], [u], space)[0]), -0.1, 0.2, points=[0.0])
    assert val == pytest.approx(1.0, abs=1e-10)


def test_dispersal_sample_chi_square():
    # truncated Gaussian near the boundary against its exact cell probabilities
    space = TraitSpace((0.0,), (1.0,))
    k = DispersalKernel("truncated_gaussian", 0.15)
    x = 0.1
    rng = np.random.default_rng(2024)
    draws = np.array([x + k.sample([x], space, rng)[0] for _ in range(20000)])
    edges = np.linspace(0, 1, 21)
    obs, _ = np.histogram(draws, edges)
    cdf = stats.norm(x, 0.15).cdf
    p = np.diff(cdf(edges)) / (cdf(1) - cdf(0))
    keep = p * len(draws) >= 5
    exp = p[keep] * len(draws)
    o = obs[keep]
    # fold the sparse tail cells into the last kept cell
    o[-1] += obs[~keep].sum()
    exp[-1] += p[~keep].sum() * len(draws)
    chi2 = float(np.sum((o - exp) ** 2 / exp))
    assert stats.chi2.sf(chi2, len(o) - 1) > 1e-3


def test_ball_sample_stays_in_disc(rng):
    spec = planar_model(family="uniform_ball", scale=0.1)
    for _ in range(500):
        z = sample_dispersal(spec, [0.02, 0.99], rng)
        assert np.hypot(*z) <= 0.1 + 1e-15
        assert spec.space.contains((np.array([0.02, 0.99]) + z)[None])[0]


def test_with_scale_shares_bounds(bump):
    b = bump.b_bar
    big = bump.with_scale(1000)
    assert big.scale == 1000 and big.b_bar == b


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 0.5), st.floats(0.0, 1.0))
def test_ball_density_normalized(radius, x0):
    k = DispersalKernel("uniform_ball", radius)
    space = TraitSpace((0.0,), (1.0,))
    lo, hi = max(-radius, -x0), min(radius, 1 - x0)
    vals = k.density([x0], [(lo + hi) / 2], space)
    assert float(vals[0]) * (hi - lo) == pytest.approx(1.0, rel=1e-9)


def test_bump_model_has_positive_alpha_min():
    assert bump_model().alpha_min > 0
