import math

import numpy as np
import pytest
from scipy import integrate as spi

from bpdl.errors import PreconditionError
from bpdl.ou1d import (OUParams, char_fn, ou_coefficients, path_state, simulate_ou, theta_integral, variance,
                       variance_ode_residual)

P = OUParams(2.0, 1.0, 1.0, 0.5)


def test_long_time_variance_is_b_over_alpha():
    assert abs(variance(P, 20.0) - P.b / P.alpha) <= 1e-4
    assert P.stationary_variance == 2.0 and P.equilibrium == 1.0


def test_started_at_equilibrium_has_closed_form():
    q = OUParams(3.0, 1.0, 0.5, 4.0)
    ts = np.array([0.1, 0.7, 2.5])
    assert np.allclose(variance(q, ts), q.b / q.alpha * (1 - np.exp(-2 * q.r * ts)), atol=1e-10)


@pytest.mark.parametrize("xi0", [0.0, 0.05, 0.5, 3.0])
def test_theta_integral_against_quadrature(xi0):
    q = OUParams(2.0, 0.5, 1.5, xi0)
    for t in (0.3, 2.0, 40.0):
        ref = spi.quad(lambda u: ou_coefficients(q, u)[1], 0, t, limit=200, epsabs=1e-12)[0]
        assert theta_integral(q, t) == pytest.approx(ref, abs=1e-9)


def test_variance_solves_its_ode():
    assert variance_ode_residual(P, [0.5, 2.0, 8.0]) < 1e-6


def test_characteristic_function_is_gaussian():
    q = OUParams(2.0, 1.0, 1.0, 0.5, eta0=0.3)
    st = path_state(q, 1.5)
    mean = 0.3 * math.exp(-theta_integral(q, 1.5))
    z = np.array([0.0, 0.4, 1.7])
    assert np.allclose(char_fn(q, z, 1.5), np.exp(1j * z * mean - 0.5 * z * z * st.V))


def test_euler_maruyama_variance(rng):
    _, eta = simulate_ou(P, 5.0, 0.005, rng, paths=4000)
    V = variance(P, 5.0)
    se = V * math.sqrt(2 / 4000)
    assert abs(eta[:, -1].var(ddof=1) - V) < 4 * se


def test_preconditions():
    with pytest.raises(PreconditionError):
        OUParams(1.0, 1.0, 1.0, 0.5)
    with pytest.raises(PreconditionError):
        OUParams(2.0, 1.0, 0.0, 0.5)
    with pytest.raises(PreconditionError):
        variance(P, -1.0)
    with pytest.raises(PreconditionError):
        simulate_ou(P, 1.0, 0.5, np.random.default_rng(0))
