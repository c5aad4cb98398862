"""Fluctuations of the particle process around its deterministic limit.

Carrier for the limiting covariance: node masses ``y_p`` on the mean-field
grid, so that ``<Y, phi> = sum_p y_p phi(x_p)``.  With the drift operator
``A_t`` acting on grid functions and the diagonal noise covariance ``Q_t``,
node masses obey ``dy = A_t^T y dt + dW`` and their covariance ``C`` solves
``dC/dt = A_t^T C + C A_t + Q_t``.  Test-function covariances are
``Phi^T C Phi``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats
from scipy.integrate import cumulative_trapezoid

from .errors import AlignmentError, EstimatorError, NumericalInstabilityError, PreconditionError
from .ibm_sim import KIND_BIRTH, EventLog, MeasurePath, SimulationResult
from .meanfield import (DensityPath, GridDensity, TraitGrid, discretize, initial_density,
                        integrate, mass_bound)
from .model import ModelSpec, ScalarField, as_points

PSD_TOL = 1e-6


# ---------------------------------------------------------------------------
# test functions


@dataclass(frozen=True, eq=False)
class TestFunctionSet:
    """Named smooth test functions on the trait space."""

    fields: tuple[ScalarField, ...]
    names: tuple[str, ...]
    dim: int = 1

    def __post_init__(self):
        if not self.fields:
            raise PreconditionError("need at least one test function")
        if len(self.fields) != len(self.names):
            raise PreconditionError("one name per test function")
        object.__setattr__(self, "fields", tuple(self.fields))
        object.__setattr__(self, "names", tuple(self.names))

    __test__ = False  # not a pytest class

    @classmethod
    def default(cls, dim: int = 1, center: float = 0.5, width: float = 0.15) -> "TestFunctionSet":
        """``{1, x, x^2, bump}`` in 1-d; ``{1, x_1, x_2, x_1 x_2, bump}`` in 2-d."""
        if dim == 1:
            return cls((ScalarField.constant(1.0), ScalarField.monomial([1]), ScalarField.monomial([2]),
                        ScalarField.gaussian_bump([center], width, 1.0)),
                       ("one", "x", "x2", "bump"), 1)
        return cls((ScalarField.constant(1.0), ScalarField.monomial([1, 0]), ScalarField.monomial([0, 1]),
                    ScalarField.monomial([1, 1]), ScalarField.gaussian_bump([center] * dim, width, 1.0)),
                   ("one", "x1", "x2", "x1x2", "bump"), dim)

    @classmethod
    def from_dicts(cls, items: Sequence[dict], dim: int) -> "TestFunctionSet":
        fields, names = [], []
        for j, d in enumerate(items):
            d = dict(d)
            names.append(d.pop("name", f"phi{j}"))
            fields.append(ScalarField.from_dict(d))
        return cls(tuple(fields), tuple(names), dim)

    def to_dicts(self) -> list[dict]:
        return [{"name": n, **f.to_dict()} for n, f in zip(self.names, self.fields)]

    def __len__(self) -> int:
        return len(self.fields)

    def evaluate(self, pts) -> np.ndarray:
        pts = as_points(pts, self.dim)
        return np.stack([f(pts, self.dim) for f in self.fields], axis=1)

    def sup_norms(self, grid: TraitGrid) -> np.ndarray:
        return np.abs(self.evaluate(grid.points)).max(axis=0)

    def gram_condition(self, grid: TraitGrid) -> float:
        Phi = self.evaluate(grid.points)
        gram = Phi.T @ (grid.weights[:, None] * Phi)
        return float(np.linalg.cond(gram))


# ---------------------------------------------------------------------------
# empirical fluctuation processes


@dataclass
class FluctuationPath:
    """``Y[r, m, j] = sqrt(n) (<X^n_{t_m}, phi_j> - <X_{t_m}, phi_j>)`` over replicas."""

    times: np.ndarray
    names: list[str]
    Y: np.ndarray
    n: int
    martingale: np.ndarray | None = None
    compensator: np.ndarray | None = None
    bracket: np.ndarray | None = None

    def at(self, t: float) -> np.ndarray:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > 1e-9 * max(1.0, abs(t)):
            raise AlignmentError(f"time {t} is not a snapshot")
        return self.Y[:, i, :]


def _mf_values(mf: DensityPath, tests: TestFunctionSet, times) -> np.ndarray:
    idx = mf.index_of(times)
    return mf.project(tests.evaluate(mf.grid.points))[idx]


def fluctuation_path(sims, mf: DensityPath, n: int, tests: TestFunctionSet) -> FluctuationPath:
    """Rescaled deviations of one or more simulated paths from the limit."""
    if isinstance(sims, (MeasurePath, SimulationResult)):
        sims = [sims]
    paths = [s.path if isinstance(s, SimulationResult) else s for s in sims]
    if not paths:
        return FluctuationPath(np.zeros(0), list(tests.names), np.zeros((0, 0, len(tests))), n)
    times = paths[0].times
    for p in paths:
        if len(p.times) != len(times) or np.any(p.times != times):
            raise AlignmentError("replica paths have different snapshot times")
        if list(p.names) != list(tests.names):
            raise AlignmentError(f"observables {p.names} do not match test functions {list(tests.names)}")
    ref = _mf_values(mf, tests, times)
    sq = math.sqrt(n)
    Y = np.stack([sq * (p.values - ref) for p in paths])
    return FluctuationPath(times, list(tests.names), Y, n)


@dataclass
class MartingaleResult:
    """Per-snapshot martingale, compensator and empirical bracket for one replica.

    ``scaled_n_martingale`` is ``sqrt(n) N^n`` built from the particle path
    alone; it differs from ``martingale`` only by ``sqrt(n)`` times the residual
    of the numerical limit in the weak form.
    """

    times: np.ndarray
    names: list[str]
    martingale: np.ndarray
    compensator: np.ndarray
    bracket: np.ndarray
    scaled_n_martingale: np.ndarray
    reconstruction_error: float


def _piecewise_integral(event_times: np.ndarray, values: np.ndarray, t0: float, ts: np.ndarray) -> np.ndarray:
    """``int_{t0}^{t} S(s) ds`` for a right-continuous step function.

    ``values[e]`` holds ``S`` on ``[tau_e, tau_{e+1})`` with ``tau_0 = t0``.
    """
    taus = np.concatenate([[t0], event_times])
    dts = np.diff(taus)
    cum = np.zeros_like(values)
    if len(dts):
        cum[1:] = np.cumsum(values[:-1] * dts.reshape(-1, *([1] * (values.ndim - 1))), axis=0)
    idx = np.searchsorted(event_times, ts, side="right")
    span = (ts - taus[idx]).reshape(-1, *([1] * (values.ndim - 1)))
    return cum[idx] + values[idx] * span


def _particle_terms(spec: ModelSpec, x: np.ndarray, tests: TestFunctionSet,
                    nodes: int) -> dict[str, np.ndarray]:
    """Per-particle contributions, each of shape ``(N, K)`` (``(N, K, m)`` for ``phif``)."""
    dim = spec.dim
    phi = tests.evaluate(x)
    b = spec.birth(x, dim)[:, None]
    d = spec.death(x, dim)[:, None]
    F, G = spec.competition.factors(x, dim)
    disp = spec.dispersal
    if len(x) == 0:
        Pphi = Pphi2 = np.zeros_like(phi)
    else:
        Pphi = np.stack([disp.expectation(lambda p, j=j: tests.fields[j](p, dim), x, spec.space, nodes)
                         for j in range(len(tests))], axis=1)
        Pphi2 = np.stack([disp.expectation(lambda p, j=j: tests.fields[j](p, dim) ** 2, x, spec.space, nodes)
                          for j in range(len(tests))], axis=1)
    return {
        "phi": phi, "bPphi": b * Pphi, "phid": phi * d, "bPphi2": b * Pphi2, "phi2d": phi * phi * d,
        "phif": phi[:, :, None] * F[:, None, :], "phi2f": (phi * phi)[:, :, None] * F[:, None, :],
        "g": G,
    }


def martingale_path(sim: SimulationResult, mf: DensityPath, spec: ModelSpec, tests: TestFunctionSet,
                    times=None, quad_nodes: int = 48) -> MartingaleResult:
    """Martingale part of ``<Y^n, phi>``, its compensator and the sum of squared jumps.

    Particle integrals are exact (the configuration is constant between
    logged events).  Limit integrals use the trapezoid rule on the snapshots
    of ``mf``, which should be finer than ``times``.
    """
    log: EventLog | None = sim.log
    if log is None:
        raise PreconditionError("martingale_path needs a simulation run with record_log=True")
    n = spec.scale
    K = len(tests)
    ts = np.asarray(sim.path.times if times is None else times, float)
    t0 = log.t0

    init = _particle_terms(spec, log.initial, tests, quad_nodes)
    sums0 = {k: v.sum(axis=0) for k, v in init.items()}
    E = len(log)
    birth = log.kind == KIND_BIRTH
    moved = np.where(birth[:, None], log.trait_b, log.trait_a)
    sign = np.where(birth, 1.0, -1.0)
    ev = _particle_terms(spec, moved, tests, quad_nodes)
    # running sums after each event; index 0 is the initial configuration
    run = {}
    for k, v in ev.items():
        delta = v * sign.reshape(-1, *([1] * (v.ndim - 1)))
        run[k] = np.concatenate([sums0[k][None], sums0[k][None] + np.cumsum(delta, axis=0)])

    def integral(values):
        return _piecewise_integral(log.time, values, t0, ts)

    comp_lin = np.einsum("ejk,ek->ej", run["phif"], run["g"]) / n
    comp_sq = np.einsum("ejk,ek->ej", run["phi2f"], run["g"]) / n
    I_birth = integral(run["bPphi"]) / n
    I_death = integral(run["phid"]) / n
    I_comp = integral(comp_lin) / n
    comp_int = integral(run["bPphi2"] + run["phi2d"] + comp_sq) / n
    idx = np.searchsorted(log.time, ts, side="right")
    Xn = run["phi"][idx] / n
    Xn0 = sums0["phi"] / n
    Nn = Xn - Xn0 - I_birth + I_death + I_comp

    # limit integrals on the mean-field path (discrete generator of the solver)
    disc = discretize(spec, mf.grid)
    Phi = tests.evaluate(mf.grid.points)
    wu = mf.values * mf.grid.weights
    comp = np.stack([disc.competition(u) for u in mf.values])
    PPhi = disc.disperse(Phi)
    lin = wu @ (disc.b[:, None] * PPhi) - (wu * disc.d) @ Phi - (wu * comp) @ Phi
    L = cumulative_trapezoid(lin, mf.times, axis=0, initial=0.0)
    X = wu @ Phi
    j = mf.index_of(ts)
    j0 = mf.index_of([t0])[0]
    Nx = X[j] - X[j0] - (L[j] - L[j0])
    sq = math.sqrt(n)
    M = sq * (Nn - Nx)

    jumps = tests.evaluate(moved) ** 2 / n if E else np.zeros((0, K))
    cumj = np.concatenate([np.zeros((1, K)), np.cumsum(jumps, axis=0)])
    bracket = cumj[idx]

    # reconstruction: <Y_t> - <Y_0> - drift - M
    Y = sq * (Xn - X[j])
    Y0 = sq * (Xn0 - X[j0])
    drift = sq * (I_birth - I_death - I_comp) - sq * (L[j] - L[j0])
    recon = float(np.max(np.abs(Y - Y0 - drift - M))) if len(ts) else 0.0
    return MartingaleResult(ts, list(tests.names), M, comp_int, bracket, sq * Nn, recon)


# ---------------------------------------------------------------------------
# limiting operators


def operator_A(u: GridDensity | np.ndarray, spec: ModelSpec, grid: TraitGrid) -> np.ndarray:
    """Drift operator on grid functions.

    ``(A phi)_p = b_p (P phi)_p - phi_p (d_p + (alpha u)_p) - sum_q alpha(x_q, x_p) phi_q w_q u_q``.
    """
    vals = u.values if isinstance(u, GridDensity) else np.asarray(u, float)
    disc = discretize(spec, grid)
    comp = disc.competition(vals)
    wu = disc.w * vals
    first = disc.b[:, None] * (np.eye(grid.size) if disc.P is None else disc.P)
    adj = disc.alpha_matrix().T * wu[None, :]
    return first - np.diag(disc.d + comp) - adj


def operator_Q(u: GridDensity | np.ndarray, spec: ModelSpec, grid: TraitGrid) -> np.ndarray:
    """Noise covariance on grid functions (diagonal in the node basis)."""
    vals = u.values if isinstance(u, GridDensity) else np.asarray(u, float)
    disc = discretize(spec, grid)
    wu = disc.w * vals
    births = disc.disperse_adjoint(wu * disc.b)
    return np.diag(births + wu * (disc.d + disc.competition(vals)))


@dataclass
class CovarianceState:
    time: float
    K: np.ndarray


def _check_psd(K: np.ndarray, t: float) -> None:
    ev = np.linalg.eigvalsh(K)
    scale = max(1.0, float(np.abs(ev).max()))
    if ev.min() < -PSD_TOL * scale:
        raise NumericalInstabilityError(f"covariance lost positive semidefiniteness at t={t:.6g}: "
                                        f"min eigenvalue {ev.min():.3g}")


def lyapunov_integrate(K0, A, Q, T: float, dt: float, snap_times=None, t0: float = 0.0,
                       check_every: int | None = None) -> list[CovarianceState]:
    """RK4 for ``dK/dt = A K + K A^T + Q`` with symmetrization after every step.

    ``A`` and ``Q`` are matrices or callables of time.  States are returned at
    ``snap_times`` (default ``[t0, T]``); positive semidefiniteness is checked
    at every returned state and every ``check_every`` steps.
    """
    K = np.array(K0, float)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise PreconditionError("K0 must be square")
    if not np.allclose(K, K.T, atol=1e-12 * max(1.0, np.abs(K).max())):
        raise PreconditionError("K0 must be symmetric")
    _check_psd(K, t0)
    Af = A if callable(A) else (lambda t, M=np.asarray(A, float): M)
    Qf = Q if callable(Q) else (lambda t, M=np.asarray(Q, float): M)

    def f(t, K):
        a = Af(t)
        aK = a @ K
        return aK + aK.T + Qf(t)

    ts = np.array([t0, T]) if snap_times is None else np.asarray(snap_times, float)
    out = []
    t = t0
    steps_done = 0
    for target in ts:
        span = target - t
        steps = int(math.ceil(span / dt - 1e-9)) if span > 1e-15 else 0
        if steps:
            h = span / steps
            for _ in range(steps):
                k1 = f(t, K)
                k2 = f(t + h / 2, K + h / 2 * k1)
                k3 = f(t + h / 2, K + h / 2 * k2)
                k4 = f(t + h, K + h * k3)
                K = K + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
                K = 0.5 * (K + K.T)
                t += h
                steps_done += 1
                if check_every and steps_done % check_every == 0:
                    _check_psd(K, t)
        t = float(target)
        _check_psd(K, t)
        out.append(CovarianceState(t, K.copy()))
    return out


def initial_covariance(u0: GridDensity, mode: str) -> np.ndarray:
    """Node-mass covariance of ``Y^n_0`` in the large-``n`` limit.

    ``quantized``: zero.  ``iid``: ``round(n M0)`` independent draws from the
    normalized law give ``diag(m) - m m^T / M0`` with node masses ``m``.
    """
    m = u0.grid.weights * u0.values
    if mode == "quantized":
        return np.zeros((m.size, m.size))
    if mode == "iid":
        M0 = m.sum()
        return np.diag(m) - np.outer(m, m) / M0
    raise PreconditionError(f"unknown initial mode {mode!r}")


@dataclass
class LimitCovariance:
    times: np.ndarray
    names: list[str]
    K: np.ndarray          # (M, K, K) projected onto the test functions
    grid_states: list[CovarianceState]
    mf: DensityPath

    def at(self, t: float) -> np.ndarray:
        i = int(np.argmin(np.abs(self.times - t)))
        return self.K[i]


def limit_covariance(spec: ModelSpec, init, grid: TraitGrid, tests: TestFunctionSet, times,
                     dt: float = 0.01, mode: str | None = None, mf_dt: float | None = None) -> LimitCovariance:
    """Covariance of the Gaussian limit of ``<Y_t, phi_j>`` at ``times``.

    The limit density is integrated on a lattice of half covariance steps so
    that every RK4 stage time has an exact mean-field state.
    """
    ts = np.asarray(times, float)
    knots = np.unique(np.concatenate([[0.0], ts]))
    fine, nsteps = [0.0], []
    for a, b in zip(knots[:-1], knots[1:]):
        k = max(1, int(math.ceil((b - a) / dt - 1e-9)))
        nsteps.append(k)
        fine.extend(np.linspace(a, b, 2 * k + 1)[1:])
    fine = np.array(fine)
    u0 = initial_density(spec, init, grid)
    T = float(knots[-1])
    if mf_dt is None:
        mf_dt = 0.25 / _rate(spec, u0, T)
    mf = integrate(u0, spec, T, mf_dt, fine)
    cache: dict = {}

    def ops(t):
        i = int(np.argmin(np.abs(mf.times - t)))
        if abs(mf.times[i] - t) > 1e-9 * max(1.0, T):
            raise AlignmentError(f"no mean-field state at t={t}")
        if i not in cache:
            if len(cache) > 8:
                cache.clear()
            u = mf.values[i]
            cache[i] = (operator_A(u, spec, grid).T, operator_Q(u, spec, grid))
        return cache[i]

    K = initial_covariance(u0, mode or init.mode)
    states = {0.0: CovarianceState(0.0, K.copy())}
    for (a, b), k in zip(zip(knots[:-1], knots[1:]), nsteps):
        st = lyapunov_integrate(K, lambda t: ops(t)[0], lambda t: ops(t)[1], float(b), (b - a) / k,
                                [float(b)], t0=float(a))
        K = st[-1].K
        states[float(b)] = st[-1]
    Phi = tests.evaluate(grid.points)
    want = [states[float(t)] for t in ts]
    proj = np.stack([Phi.T @ s.K @ Phi for s in want])
    return LimitCovariance(ts, list(tests.names), proj, want, mf)


def _rate(spec: ModelSpec, u0: GridDensity, T: float) -> float:
    return spec.b_bar + spec.d_bar + spec.alpha_bar * mass_bound(spec, u0.mass, T)


# ---------------------------------------------------------------------------
# estimators and diagnostics


@dataclass
class CovarianceEstimate:
    cov: np.ndarray
    se: np.ndarray
    replicas: int


def empirical_covariance(samples, t: float | None = None) -> CovarianceEstimate:
    """Unbiased sample covariance across replicas with jackknife standard errors.

    ``samples`` is an ``(R, K)`` array or a :class:`FluctuationPath` with ``t``.
    The leave-one-out estimates use the closed form
    ``C_(i) = (S - R/(R-1) z_i z_i^T) / (R - 2)`` with centered ``z``.
    """
    X = samples.at(t) if isinstance(samples, FluctuationPath) else np.asarray(samples, float)
    if X.ndim == 1:
        X = X[:, None]
    R = X.shape[0]
    if R < 2:
        raise EstimatorError(f"need at least 2 replicas, got {R}")
    z = X - X.mean(axis=0)
    S = z.T @ z
    cov = S / (R - 1)
    if R < 3:
        return CovarianceEstimate(cov, np.full_like(cov, np.nan), R)
    outer = z[:, :, None] * z[:, None, :]
    loo = (S[None] - (R / (R - 1)) * outer) / (R - 2)
    se = np.sqrt((R - 1) / R * np.sum((loo - loo.mean(axis=0)) ** 2, axis=0))
    return CovarianceEstimate(cov, se, R)


def jackknife_variance_se(x) -> tuple[float, float]:
    est = empirical_covariance(np.asarray(x, float).reshape(-1, 1))
    return float(est.cov[0, 0]), float(est.se[0, 0])


def _stats(x: np.ndarray) -> tuple[float, float, float]:
    sk = float(stats.skew(x, bias=False))
    ku = float(stats.kurtosis(x, fisher=True, bias=False))
    mu, sd = x.mean(), x.std(ddof=1)
    ks = float(stats.kstest((x - mu) / sd, "norm").statistic)
    return sk, ku, ks


def gaussianity_diagnostics(samples, n_boot: int = 999, rng: np.random.Generator | None = None,
                            min_samples: int = 100) -> dict:
    """Skewness, excess kurtosis and KS distance to the fitted normal.

    p-values come from a parametric bootstrap under the fitted normal (the
    KS statistic with estimated parameters is not distribution free).
    """
    x = np.asarray(samples, float).ravel()
    if x.size < min_samples:
        raise EstimatorError(f"need at least {min_samples} samples, got {x.size}")
    sd = x.std(ddof=1)
    if not sd > 1e-12 * max(1.0, float(np.abs(x).max())):
        return {"degenerate": True, "n": int(x.size), "skewness": float("nan"),
                "excess_kurtosis": float("nan"), "ks": float("nan"), "p_skewness": float("nan"),
                "p_kurtosis": float("nan"), "p_ks": float("nan")}
    sk, ku, ks = _stats(x)
    rng = rng if rng is not None else np.random.default_rng(0)
    boot = np.array([_stats(rng.standard_normal(x.size)) for _ in range(n_boot)])
    p = lambda obs, col: float((1 + np.sum(np.abs(boot[:, col]) >= abs(obs))) / (n_boot + 1))
    return {"degenerate": False, "n": int(x.size), "skewness": sk, "excess_kurtosis": ku, "ks": ks,
            "p_skewness": p(sk, 0), "p_kurtosis": p(ku, 1), "p_ks": p(ks, 2)}


__all__ = [
    "TestFunctionSet", "FluctuationPath", "MartingaleResult", "CovarianceState", "LimitCovariance",
    "CovarianceEstimate", "fluctuation_path", "martingale_path", "operator_A", "operator_Q",
    "lyapunov_integrate", "initial_covariance", "limit_covariance", "empirical_covariance",
    "jackknife_variance_se", "gaussianity_diagnostics",
]
