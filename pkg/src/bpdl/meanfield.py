"""Deterministic large-population limit on a trait grid.

The limit measure is carried as a density ``u`` on a regular lattice with
product-trapezoid weights ``w``.  Offspring redistribution is a row-stochastic
matrix ``P`` whose entry ``P[q, p]`` is the fraction of offspring born at node
``q`` attributed to node ``p``.  In one dimension ``P`` is built in closed form
by integrating the renormalized dispersal law against the piecewise-linear hat
functions of the lattice, so it conserves mass and first moments exactly;
truncated Gaussians in higher dimension use the Kronecker product of the
per-axis matrices.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .errors import AlignmentError, ConfigError, DivergenceError, PreconditionError
from .model import ModelSpec, TraitSpace, as_points

DEFAULT_NODES = 64
STABILITY_LIMIT = 0.5
DIVERGENCE_FACTOR = 10.0
NEG_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class TraitGrid:
    """Regular lattice over the trait box with product-trapezoid weights."""

    space: TraitSpace
    nodes: int = DEFAULT_NODES

    def __post_init__(self):
        if self.nodes < 2:
            raise ConfigError("grid needs at least 2 nodes per dimension")
        if self.space.dim > 2:
            raise ConfigError("mean-field grids support d <= 2")
        axes = tuple(np.linspace(a, b, self.nodes) for a, b in zip(self.space.lower, self.space.upper))
        w1 = []
        for ax in axes:
            h = ax[1] - ax[0]
            w = np.full(len(ax), h)
            w[0] = w[-1] = h / 2
            w1.append(w)
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=1)
        wts = w1[0]
        for w in w1[1:]:
            wts = np.outer(wts, w).ravel()
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "axis_weights", tuple(w1))
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", wts)

    @property
    def dim(self) -> int:
        return self.space.dim

    @property
    def size(self) -> int:
        return len(self.weights)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.nodes,) * self.dim

    @property
    def spacing(self) -> np.ndarray:
        return np.array([ax[1] - ax[0] for ax in self.axes])

    def hat_weights(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Node indices and multilinear hat weights for each point of ``x``.

        Returns ``(idx, wt)`` of shape ``(N, 2**dim)``.
        """
        pts = as_points(x, self.dim)
        lo = np.array(self.space.lower)
        h = self.spacing
        pos = (pts - lo) / h
        i0 = np.clip(np.floor(pos).astype(int), 0, self.nodes - 2)
        t = pos - i0
        idx = np.zeros((len(pts), 1 << self.dim), dtype=np.int64)
        wt = np.ones((len(pts), 1 << self.dim))
        for c in range(1 << self.dim):
            flat = np.zeros(len(pts), dtype=np.int64)
            for j in range(self.dim):
                bit = (c >> j) & 1
                wt[:, c] *= t[:, j] if bit else 1.0 - t[:, j]
                flat = flat * self.nodes + i0[:, j] + bit
            idx[:, c] = flat
        return idx, wt


@dataclass
class GridDensity:
    grid: TraitGrid
    values: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, float).reshape(self.grid.size)

    @property
    def mass(self) -> float:
        return float(self.grid.weights @ self.values)

    def integrate(self, phi) -> float:
        """``<u, phi>`` by the grid quadrature."""
        vals = phi(self.grid.points) if callable(phi) else np.asarray(phi, float)
        return float(self.grid.weights @ (self.values * vals))


# ---------------------------------------------------------------------------
# dispersal redistribution


def _hat_matrix_1d(nodes: np.ndarray, family: str, scale: float) -> np.ndarray:
    N = len(nodes)
    h = nodes[1] - nodes[0]
    a, b = nodes[:-1][None, :], nodes[1:][None, :]
    mu = nodes[:, None]
    if family == "truncated_gaussian":
        za, zb = (a - mu) / scale, (b - mu) / scale
        # difference of normal CDFs, taken on the tail side that keeps precision
        I0 = np.where(za > 0, special.ndtr(-za) - special.ndtr(-zb), special.ndtr(zb) - special.ndtr(za))
        pdf = lambda z: np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
        I1 = scale * (pdf(za) - pdf(zb))
        ybar = mu * I0 + I1
    elif family == "uniform_ball":
        lo = np.maximum(a, mu - scale)
        hi = np.minimum(b, mu + scale)
        live = hi > lo
        I0 = np.where(live, (hi - lo) / (2 * scale), 0.0)
        ybar = np.where(live, (hi * hi - lo * lo) / (4 * scale), 0.0)
    else:
        raise ConfigError(f"no hat construction for {family!r}")
    right = (ybar - a * I0) / h
    left = (b * I0 - ybar) / h
    P = np.zeros((N, N))
    P[:, :-1] += left
    P[:, 1:] += right
    P = np.maximum(P, 0.0)
    return P / P.sum(axis=1, keepdims=True)


def dispersal_matrix(spec: ModelSpec, grid: TraitGrid) -> np.ndarray | None:
    """Row-stochastic offspring redistribution; ``None`` means the identity."""
    disp = spec.dispersal
    if disp.family == "point_mass":
        return None
    if grid.dim == 1 or disp.family == "truncated_gaussian":
        mats = [_hat_matrix_1d(ax, disp.family, disp.scale) for ax in grid.axes]
        P = mats[0]
        for M in mats[1:]:
            P = np.kron(P, M)
        return P
    # uniform disc in 2-d: pointwise kernel with quadrature weights
    diff = grid.points[:, None, :] - grid.points[None, :, :]
    inside = np.sum(diff * diff, axis=2) <= disp.scale ** 2
    P = inside * grid.weights[None, :]
    return P / P.sum(axis=1, keepdims=True)


@dataclass(eq=False)
class Discretization:
    """Rate fields sampled on the grid plus the redistribution matrix."""

    spec: ModelSpec
    grid: TraitGrid
    b: np.ndarray = field(init=False)
    d: np.ndarray = field(init=False)
    F: np.ndarray = field(init=False)
    G: np.ndarray = field(init=False)
    P: np.ndarray | None = field(init=False)

    def __post_init__(self):
        pts, dim = self.grid.points, self.grid.dim
        self.b = self.spec.birth(pts, dim)
        self.d = self.spec.death(pts, dim)
        self.F, self.G = self.spec.competition.factors(pts, dim)
        self.P = dispersal_matrix(self.spec, self.grid)

    @property
    def w(self) -> np.ndarray:
        return self.grid.weights

    def competition(self, u: np.ndarray) -> np.ndarray:
        """``int alpha(x_p, y) u(y) dy`` at every node."""
        return self.F @ (self.G.T @ (self.w * u))

    def alpha_matrix(self) -> np.ndarray:
        return self.F @ self.G.T

    def disperse(self, v: np.ndarray) -> np.ndarray:
        """``P v``: dispersal expectation of a grid function."""
        return v if self.P is None else self.P @ v

    def disperse_adjoint(self, v: np.ndarray) -> np.ndarray:
        return v if self.P is None else self.P.T @ v

    def rhs(self, u: np.ndarray) -> np.ndarray:
        w = self.w
        births = self.disperse_adjoint(w * self.b * u) / w
        return births - u * (self.d + self.competition(u))


def discretize(spec: ModelSpec, grid: TraitGrid) -> Discretization:
    """Cached :class:`Discretization` for ``(spec, grid)``."""
    cache = spec.__dict__.setdefault("_disc_cache", {})
    key = (grid.nodes, grid.space.lower, grid.space.upper)
    disc = cache.get(key)
    if disc is None:
        disc = cache[key] = Discretization(spec, grid)
    return disc


def density_rhs(u: GridDensity, spec: ModelSpec) -> GridDensity:
    """Time derivative of the grid density under the limiting equation."""
    return GridDensity(u.grid, discretize(spec, u.grid).rhs(u.values), u.time)


# ---------------------------------------------------------------------------
# initial data and time stepping


def initial_density(spec: ModelSpec, init, grid: TraitGrid) -> GridDensity:
    """Grid representation of the initial measure with matched total mass.

    Point masses are deposited onto the surrounding nodes with multilinear
    weights (exact for nodes, first-moment preserving otherwise).
    """
    if init.law == "point":
        idx, wt = grid.hat_weights(np.array(init.point))
        u = np.zeros(grid.size)
        np.add.at(u, idx[0], init.mass * wt[0])
        return GridDensity(grid, u / grid.weights)
    u = init.density(grid.points, spec)
    return GridDensity(grid, u * init.mass / float(grid.weights @ u))


def mass_bound(spec: ModelSpec, mass0: float, T: float) -> float:
    """A-priori bound on the limiting mass over ``[0, T]``."""
    amin = spec.alpha_min
    if amin > 0:
        return max(mass0, spec.b_bar / amin)
    return mass0 * math.exp(spec.b_bar * T)


@dataclass
class DensityPath:
    grid: TraitGrid
    times: np.ndarray
    values: np.ndarray
    clipped: list = field(default_factory=list)

    def __post_init__(self):
        self.times = np.asarray(self.times, float)
        self.values = np.asarray(self.values, float).reshape(len(self.times), self.grid.size)

    @property
    def mass(self) -> np.ndarray:
        return self.values @ self.grid.weights

    def at(self, i: int) -> GridDensity:
        return GridDensity(self.grid, self.values[i], float(self.times[i]))

    def project(self, phi_matrix: np.ndarray) -> np.ndarray:
        """``<u_t, phi_j>`` for grid values ``phi_matrix`` of shape ``(P, K)``."""
        return (self.values * self.grid.weights) @ phi_matrix

    def index_of(self, times) -> np.ndarray:
        ts = np.atleast_1d(np.asarray(times, float))
        idx = np.searchsorted(self.times, ts)
        idx = np.clip(idx, 0, len(self.times) - 1)
        bad = np.abs(self.times[idx] - ts) > 1e-9 * np.maximum(1.0, np.abs(ts))
        if np.any(bad):
            raise AlignmentError(f"times {ts[bad].tolist()} are not snapshots of the density path")
        return idx

    def to_dict(self) -> dict:
        return {"nodes": self.grid.nodes, "times": self.times.tolist(), "mass": self.mass.tolist(),
                "values": self.values.tolist()}


def _rk4(f, u, h):
    k1 = f(u)
    k2 = f(u + 0.5 * h * k1)
    k3 = f(u + 0.5 * h * k2)
    k4 = f(u + h * k3)
    return u + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(u0: GridDensity, spec: ModelSpec, T: float, dt: float | None = None,
              snap_times=None, check_stability: bool = True) -> DensityPath:
    """Classical RK4 with fixed step, shortened evenly to land on snapshots.

    The stability precheck requires ``dt (b_bar + d_bar + alpha_bar M) < 0.5``
    with ``M`` the a-priori mass bound; the run stops with
    :class:`DivergenceError` if the mass exceeds ten times that bound.
    """
    if T < 0:
        raise ConfigError("T must be nonnegative")
    ts = np.array([0.0, T]) if snap_times is None else np.asarray(snap_times, float)
    if ts.size == 0 or ts[0] < 0 or np.any(np.diff(ts) <= 0) or ts[-1] > T * (1 + 1e-12):
        raise ConfigError("snap_times must be strictly increasing within [0, T]")
    disc = discretize(spec, u0.grid)
    m0 = u0.mass
    bound = mass_bound(spec, m0, T)
    rate = spec.b_bar + spec.d_bar + spec.alpha_bar * bound
    if dt is None:
        dt = 0.25 / rate
    if not dt > 0:
        raise PreconditionError("dt must be positive")
    if check_stability and dt * rate >= STABILITY_LIMIT:
        raise PreconditionError(f"dt={dt} fails the stability precheck dt*rate={dt * rate:.3g} >= {STABILITY_LIMIT}")
    u = u0.values.copy()
    t = float(u0.time)
    out = np.zeros((len(ts), u.size))
    clipped = []
    w = u0.grid.weights
    for m, target in enumerate(ts):
        span = target - t
        if span < -1e-12:
            raise ConfigError("snapshot before the initial time")
        steps = int(math.ceil(span / dt - 1e-9)) if span > 0 else 0
        if steps:
            h = span / steps
            for _ in range(steps):
                u = _rk4(disc.rhs, u, h)
                neg = u.min()
                if neg < 0:
                    if neg < -NEG_TOL * max(1.0, np.abs(u).max()):
                        clipped.append((t, float(neg)))
                    u = np.maximum(u, 0.0)
                mass = float(w @ u)
                if not np.isfinite(mass) or mass > DIVERGENCE_FACTOR * bound:
                    raise DivergenceError(f"mass {mass:.6g} exceeds {DIVERGENCE_FACTOR} x bound {bound:.6g}")
                t += h
        t = float(target)
        out[m] = u
    return DensityPath(u0.grid, ts, out, clipped)



# ---------------------------------------------------------------------------
# weak-form checks


def quadrature_dispersal(spec: ModelSpec, grid: TraitGrid, phi_values: np.ndarray,
                         order: int = 16) -> np.ndarray:
    """Dispersal expectation of the piecewise-linear interpolant of grid values.

    ``E[phi_h(x_q + Z)]`` at every node by Gauss-Legendre quadrature on each
    lattice cell, normalized by the same quadrature of the kernel.  Independent
    of the closed-form construction of ``P``; one dimension only.
    """
    if grid.dim != 1:
        raise PreconditionError("quadrature_dispersal is one-dimensional")
    vals = np.asarray(phi_values, float)
    vals2 = vals.reshape(grid.size, -1)
    disp = spec.dispersal
    if disp.family == "point_mass":
        return vals.copy()
    ax = grid.axes[0]
    gx, gw = np.polynomial.legendre.leggauss(order)
    reach = disp.scale if disp.family == "uniform_ball" else np.inf
    out = np.empty_like(vals2)
    for q, x in enumerate(ax):
        # clip cells to the kernel support so the integrand is smooth on each piece
        a = np.maximum(ax[:-1], x - reach)
        b = np.minimum(ax[1:], x + reach)
        live = b > a
        a, b, lo = a[live], b[live], np.flatnonzero(live)
        half = 0.5 * (b - a)
        z = (0.5 * (a + b))[:, None] + half[:, None] * gx[None, :]
        t = (z - ax[lo][:, None]) / (ax[lo + 1] - ax[lo])[:, None]
        interp = (1 - t)[:, :, None] * vals2[lo][:, None, :] + t[:, :, None] * vals2[lo + 1][:, None, :]
        k = disp.base_density((z - x).reshape(-1, 1)).reshape(z.shape) * half[:, None] * gw[None, :]
        out[q] = np.einsum("co,cok->k", k, interp) / k.sum()
    return out.reshape(vals.shape)


def weak_form_residual(path: DensityPath, spec: ModelSpec, phi_values: np.ndarray,
                       disperse=None) -> np.ndarray:
    """``<u_t, phi> - <u_0, phi> - int_0^t <u_s, L_s phi> ds`` at even snapshots.

    ``L_s phi = b P phi - (d + alpha u_s) phi`` with ``P phi`` from ``disperse``
    (default: the solver's own matrix).  The time integral is composite
    Simpson over the snapshots, which must be evenly spaced with an even
    count of intervals.  Returns an array of shape ``(len(even snapshots), K)``.
    """
    ts = path.times
    if len(ts) < 3 or (len(ts) - 1) % 2:
        raise PreconditionError("need an even number of snapshot intervals")
    h = np.diff(ts)
    if np.ptp(h) > 1e-9 * h.mean():
        raise PreconditionError("snapshots must be evenly spaced")
    disc = discretize(spec, path.grid)
    Phi = np.asarray(phi_values, float).reshape(path.grid.size, -1)
    PPhi = disc.disperse(Phi) if disperse is None else np.asarray(disperse(Phi)).reshape(Phi.shape)
    wu = path.values * disc.w
    comp = np.stack([disc.competition(u) for u in path.values])
    gen = wu @ (disc.b[:, None] * PPhi) - np.einsum("mp,pk->mk", wu * (disc.d + comp), Phi)
    pair = (h[0] / 3.0) * (gen[0:-2:2] + 4.0 * gen[1:-1:2] + gen[2::2])
    integral = np.concatenate([np.zeros((1, Phi.shape[1])), np.cumsum(pair, axis=0)])
    X = wu @ Phi
    return X[::2] - X[0] - integral


def logistic_closed_form(xi0: float, b: float, d: float, alpha: float, t):
    """Solution of ``dxi = (b - d - alpha xi) xi dt`` started at ``xi0``."""
    if xi0 < 0 or not b - d > 0 or not alpha > 0:
        raise PreconditionError("need xi0 >= 0, b > d and alpha > 0")
    t = np.asarray(t, float)
    if xi0 == 0:
        return np.zeros_like(t) if t.ndim else 0.0
    r = b - d
    star = r / alpha
    # equivalent to star / (1 + (star/xi0 - 1) e^{-rt}), written to avoid overflow
    out = star * xi0 / (xi0 + (star - xi0) * np.exp(-r * t))
    return out if t.ndim else float(out)


__all__ = [
    "TraitGrid", "GridDensity", "Discretization", "DensityPath", "discretize", "dispersal_matrix",
    "density_rhs", "initial_density", "integrate", "logistic_closed_form", "mass_bound",
    "quadrature_dispersal", "weak_form_residual",
]
