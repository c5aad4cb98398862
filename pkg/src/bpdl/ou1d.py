"""Single-trait system: logistic mean and time-inhomogeneous OU fluctuation.

With all individuals sharing one trait and no dispersal, the mass follows
``dxi = (r - alpha xi) xi dt`` with ``r = b - d``, and the rescaled
fluctuation solves ``d eta = -theta_t eta dt + sigma_t dB`` with
``theta_t = -(r - 2 alpha xi_t)`` and ``sigma_t^2 = (b + d + alpha xi_t) xi_t``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate as spi

from .errors import PreconditionError
from .meanfield import logistic_closed_form


@dataclass(frozen=True)
class OUParams:
    b: float
    d: float
    alpha: float
    xi0: float
    eta0: float = 0.0

    def __post_init__(self):
        if not self.b - self.d > 0:
            raise PreconditionError("need b > d")
        if not self.alpha > 0:
            raise PreconditionError("need alpha > 0")
        if self.xi0 < 0:
            raise PreconditionError("need xi0 >= 0")

    @property
    def r(self) -> float:
        return self.b - self.d

    @property
    def equilibrium(self) -> float:
        return self.r / self.alpha

    @property
    def stationary_variance(self) -> float:
        return self.b / self.alpha


@dataclass(frozen=True)
class OUPathState:
    t: float
    xi: float
    theta: float
    sigma: float
    V: float


def ou_coefficients(p: OUParams, t):
    """``(xi_t, theta_t, sigma_t)``; vectorized over ``t``."""
    xi = logistic_closed_form(p.xi0, p.b, p.d, p.alpha, t)
    theta = -(p.r - 2 * p.alpha * xi)
    sigma = np.sqrt((p.b + p.d + p.alpha * xi) * xi)
    return xi, theta, sigma


def theta_integral(p: OUParams, t):
    """``int_0^t theta_u du`` in closed form.

    Uses ``int_0^t xi = (1/alpha) log(1 + (xi0/xi*) (e^{rt} - 1))``.
    """
    t = np.asarray(t, float)
    if p.xi0 == 0:
        out = -p.r * t
    else:
        c = p.xi0 / p.equilibrium
        x = p.r * t
        with np.errstate(over="ignore"):
            small = np.log1p(c * np.expm1(np.minimum(x, 30.0)))
        large = x + np.log(c + (1.0 - c) * np.exp(-x))
        out = -x + 2.0 * np.where(x > 30.0, large, small)
    return out if out.ndim else float(out)


def _variance_quad(p: OUParams, t: float) -> float:
    if t <= 0:
        return 0.0
    Th = theta_integral(p, t)

    def integrand(u):
        xi, _, sig = ou_coefficients(p, u)
        return sig * sig * math.exp(-2.0 * (Th - theta_integral(p, u)))

    val, err = spi.quad(integrand, 0.0, t, epsabs=1e-10, epsrel=1e-12, limit=500)
    if not np.isfinite(val) or err > 1e-8 * max(1.0, abs(val)):
        raise ArithmeticError(f"variance quadrature did not converge (err={err:.3g})")
    return float(val)


def _variance_ode(p: OUParams, ts: np.ndarray) -> np.ndarray:
    ts = np.asarray(ts, float)
    if ts.size == 0 or ts.max() <= 0:
        return np.zeros_like(ts)

    def f(t, V):
        _, th, sig = ou_coefficients(p, t)
        return -2.0 * th * V + sig * sig

    sol = spi.solve_ivp(f, (0.0, float(ts.max())), [0.0], method="DOP853", t_eval=np.sort(ts),
                        rtol=1e-12, atol=1e-14)
    out = np.empty_like(ts)
    out[np.argsort(ts)] = sol.y[0]
    return out


def variance(p: OUParams, t, cross_check: bool = True, tol: float = 1e-8):
    """``V_t = int_0^t sigma_u^2 exp(-2 int_u^t theta) du``.

    Computed by adaptive quadrature and, when ``cross_check``, also by solving
    ``dV/dt = -2 theta_t V + sigma_t^2``; a disagreement above ``tol``
    (relative to ``max(1, V)``) raises ``ArithmeticError``.
    """
    ts = np.atleast_1d(np.asarray(t, float))
    if np.any(ts < 0):
        raise PreconditionError("t must be nonnegative")
    q = np.array([_variance_quad(p, float(s)) for s in ts])
    if cross_check:
        o = _variance_ode(p, ts)
        gap = np.abs(q - o) / np.maximum(1.0, np.abs(q))
        if gap.max() > tol:
            raise ArithmeticError(f"quadrature and ODE variances disagree by {gap.max():.3g}")
    return q if np.ndim(t) else float(q[0])


def variance_ode_residual(p: OUParams, ts, h: float = 1e-4) -> float:
    """max |dV/dt + 2 theta V - sigma^2| along the quadrature V (central differences)."""
    ts = np.asarray(ts, float)
    res = 0.0
    for s in ts:
        vp, vm, v0 = variance(p, s + h, False), variance(p, s - h, False), variance(p, s, False)
        _, th, sig = ou_coefficients(p, s)
        res = max(res, abs((vp - vm) / (2 * h) + 2 * th * v0 - sig * sig))
    return res


def path_state(p: OUParams, t: float) -> OUPathState:
    xi, th, sig = ou_coefficients(p, t)
    return OUPathState(float(t), float(xi), float(th), float(sig), variance(p, t))


def char_fn(p: OUParams, z, t: float):
    """``E[exp(i z eta_t)]`` for deterministic ``eta_0``."""
    z = np.asarray(z, float)
    V = variance(p, t)
    mean = math.exp(-theta_integral(p, t)) * p.eta0
    out = np.exp(1j * z * mean - 0.5 * z * z * V)
    return out if out.ndim else complex(out)


def simulate_ou(p: OUParams, T: float, dt: float, rng: np.random.Generator, paths: int = 1,
                max_theta_dt: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Euler-Maruyama paths of ``d eta = -theta_t eta dt + sigma_t dB``.

    Returns ``(times, eta)`` with ``eta`` of shape ``(paths, steps + 1)``.
    """
    steps = int(math.ceil(T / dt - 1e-9))
    times = np.linspace(0.0, T, steps + 1)
    h = T / steps if steps else 0.0
    _, th, sig = ou_coefficients(p, times)
    th, sig = np.atleast_1d(th), np.atleast_1d(sig)
    if steps and np.max(np.abs(th)) * h >= max_theta_dt:
        raise PreconditionError(f"dt too large: max |theta| dt = {np.max(np.abs(th)) * h:.3g}")
    eta = np.empty((paths, steps + 1))
    eta[:, 0] = p.eta0
    sq = math.sqrt(h)
    for k in range(steps):
        dB = rng.standard_normal(paths) * sq
        eta[:, k + 1] = eta[:, k] - th[k] * eta[:, k] * h + sig[k] * dB
    return times, eta


__all__ = [
    "OUParams", "OUPathState", "ou_coefficients", "theta_integral", "variance", "variance_ode_residual",
    "path_state", "char_fn", "simulate_ou",
]
