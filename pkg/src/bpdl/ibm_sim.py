"""Exact event-driven simulation of the rescaled particle process.

A :class:`Population` wraps an engine core (compiled or pure Python, see
:mod:`bpdl.engine`) holding the atoms of ``nu^n_t`` plus cached rate sums.
:func:`simulate` runs it to a horizon and records observables at snapshot
times; snapshots read the post-event state when an event lands exactly on a
snapshot time.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.integrate import trapezoid

from .engine import (KIND_BIRTH, KIND_COMPETITION_DEATH, KIND_NAMES, KIND_NATURAL_DEATH,
                     STATUS_BUDGET, get_core, pack)
from .errors import BudgetError, CacheCoherenceError, ConfigError, ReplayError
from .model import ModelSpec, as_points, eval_alpha, eval_birth, eval_death

DEFAULT_EVENT_BUDGET = 100_000_000
DEBUG_CHECK_EVERY = 10_000
COHERENCE_RTOL = 1e-9

INIT_LAWS = ("point", "uniform", "grid")
INIT_MODES = ("quantized", "iid")


# ---------------------------------------------------------------------------
# initial conditions


@dataclass(frozen=True, eq=False)
class InitialCondition:
    """Total mass ``M0`` plus a spatial law for the initial population.

    ``law`` is ``point`` (all mass at ``point``), ``uniform`` on the trait box,
    or ``grid`` (a nonnegative density given by ``grid_values`` on a regular
    lattice spanning the box, interpolated multilinearly).  ``quantized`` mode
    places ``round(n M0)`` atoms deterministically at stratified quantiles;
    ``iid`` mode draws them independently.
    """

    mass: float
    law: str = "uniform"
    point: tuple[float, ...] | None = None
    grid_values: np.ndarray | None = None
    mode: str = "quantized"

    def __post_init__(self):
        if not self.mass > 0:
            raise ConfigError(f"initial mass must be positive, got {self.mass}")
        if self.law not in INIT_LAWS:
            raise ConfigError(f"unknown initial law {self.law!r}")
        if self.mode not in INIT_MODES:
            raise ConfigError(f"unknown initial mode {self.mode!r}")
        if self.law == "point":
            if self.point is None:
                raise ConfigError("point law needs 'point'")
            object.__setattr__(self, "point", tuple(float(v) for v in np.atleast_1d(self.point)))
        if self.law == "grid":
            if self.grid_values is None:
                raise ConfigError("grid law needs 'grid_values'")
            vals = np.asarray(self.grid_values, float)
            if np.any(vals < 0) or not vals.sum() > 0 or any(s < 2 for s in vals.shape):
                raise ConfigError("grid_values must be nonnegative, not all zero, >= 2 nodes per axis")
            object.__setattr__(self, "grid_values", vals)

    def count(self, n: int) -> int:
        """``round(n M0)`` with halves rounded up."""
        return int(math.floor(n * self.mass + 0.5))

    @classmethod
    def from_dict(cls, d: dict) -> "InitialCondition":
        d = dict(d)
        try:
            mass = float(d.pop("mass"))
        except KeyError:
            raise ConfigError("initial condition needs 'mass'") from None
        return cls(mass, d.get("law", "uniform"), d.get("point"), d.get("grid_values"),
                   d.get("mode", "quantized"))

    def to_dict(self) -> dict:
        out = {"mass": self.mass, "law": self.law, "mode": self.mode}
        if self.point is not None:
            out["point"] = list(self.point)
        if self.grid_values is not None:
            out["grid_values"] = self.grid_values.tolist()
        return out

    # spatial law ---------------------------------------------------------
    def density(self, x, spec: ModelSpec) -> np.ndarray:
        """Normalized spatial density at ``x`` (uniform and grid laws)."""
        pts = as_points(x, spec.dim)
        if self.law == "uniform":
            return np.full(len(pts), 1.0 / spec.space.volume)
        if self.law == "grid":
            from .model import ScalarField
            fld = ScalarField.grid_interpolant(self.grid_values, spec.space.lower, spec.space.upper)
            return fld(pts, spec.dim) / self._grid_integral(spec)
        raise ConfigError("point law has no density")

    def _grid_integral(self, spec: ModelSpec) -> float:
        vals = self.grid_values
        for ax, (a, b) in enumerate(zip(spec.space.lower, spec.space.upper)):
            vals = trapezoid(vals, dx=(b - a) / (vals.shape[0] - 1), axis=0)
        return float(vals)

    def place(self, spec: ModelSpec, n: int, rng: np.random.Generator | None = None) -> np.ndarray:
        """Initial traits, shape ``(round(n M0), dim)``."""
        N = self.count(n)
        dim = spec.dim
        if N == 0:
            return np.zeros((0, dim))
        if self.law == "point":
            x0 = spec.space.check(np.array(self.point))[0]
            return np.tile(x0, (N, 1))
        if self.mode == "quantized":
            u = stratified_unit_points(N, dim)
        else:
            if rng is None:
                raise ConfigError("iid initial mode needs a random stream")
            u = rng.random((N, dim))
        lo, hi = np.array(spec.space.lower), np.array(spec.space.upper)
        if self.law == "uniform":
            return lo + u * (hi - lo)
        if self.grid_values.ndim != dim:
            raise ConfigError(f"grid_values has {self.grid_values.ndim} axes, space has {dim}")
        if dim == 1:
            return _pl_quantile(self.grid_values, lo[0], hi[0], u[:, 0])[:, None]
        return _cell_quantile(self.grid_values, lo, hi, u)


def stratified_unit_points(N: int, dim: int) -> np.ndarray:
    """Midpoint grid in 1-d; additive recurrence (Kronecker) sequence otherwise."""
    i = np.arange(N)
    if dim == 1:
        return ((i + 0.5) / N)[:, None]
    # generalized golden ratio: root of x^(d+1) = x + 1
    g = 2.0
    for _ in range(60):
        g = (1.0 + g) ** (1.0 / (dim + 1))
    alpha = (1.0 / g) ** np.arange(1, dim + 1)
    return np.mod(0.5 + np.outer(i + 1, alpha), 1.0)


def _pl_quantile(vals: np.ndarray, lo: float, hi: float, q: np.ndarray) -> np.ndarray:
    """Inverse CDF of the piecewise-linear density through ``vals``."""
    h = (hi - lo) / (len(vals) - 1)
    cell = 0.5 * h * (vals[:-1] + vals[1:])
    cdf = np.concatenate([[0.0], np.cumsum(cell)])
    target = q * cdf[-1]
    k = np.clip(np.searchsorted(cdf, target, side="right") - 1, 0, len(cell) - 1)
    r = target - cdf[k]
    v0, v1 = vals[k], vals[k + 1]
    a = (v1 - v0) / (2 * h)
    disc = np.sqrt(np.maximum(v0 * v0 + 4 * a * r, 0.0))
    denom = v0 + disc
    s = np.where(denom > 0, 2 * r / np.where(denom > 0, denom, 1.0), 0.0)
    return lo + np.clip(k * h + s, 0.0, hi - lo)


def _cell_quantile(vals: np.ndarray, lo, hi, u: np.ndarray) -> np.ndarray:
    """Cell-wise constant approximation (corner average) for d >= 2."""
    dim = vals.ndim
    cells = vals
    for ax in range(dim):
        sl0 = [slice(None)] * dim
        sl1 = [slice(None)] * dim
        sl0[ax], sl1[ax] = slice(None, -1), slice(1, None)
        cells = 0.5 * (cells[tuple(sl0)] + cells[tuple(sl1)])
    flat = cells.ravel()
    cdf = np.cumsum(flat)
    target = u[:, 0] * cdf[-1]
    idx = np.minimum(np.searchsorted(cdf, target, side="right"), len(flat) - 1)
    start = cdf[idx] - flat[idx]
    frac0 = np.clip((target - start) / np.where(flat[idx] > 0, flat[idx], 1.0), 0, 1)
    sub = np.array(np.unravel_index(idx, cells.shape)).T
    inner = np.column_stack([frac0, u[:, 1:]])
    h = (np.asarray(hi) - np.asarray(lo)) / (np.array(vals.shape) - 1)
    return np.asarray(lo) + (sub + inner) * h


# ---------------------------------------------------------------------------
# observables


class _Callables:
    def __init__(self, funcs, names=None):
        self.funcs = list(funcs)
        self.names = list(names) if names else [getattr(f, "name", f"phi{j}") for j, f in enumerate(self.funcs)]

    def evaluate(self, pts: np.ndarray) -> np.ndarray:
        dim = pts.shape[1]
        cols = []
        for f in self.funcs:
            try:
                v = f(pts, dim)
            except TypeError:
                v = f(pts)
            cols.append(np.broadcast_to(np.asarray(v, float), (len(pts),)))
        return np.stack(cols, axis=1) if cols else np.zeros((len(pts), 0))


def as_observables(obs):
    """Accept ``None``, an object with ``names``/``evaluate`` or a list of callables."""
    if obs is None:
        return _Callables([lambda p: np.ones(len(p))], ["one"])
    if hasattr(obs, "evaluate") and hasattr(obs, "names"):
        return obs
    if callable(obs):
        obs = [obs]
    return _Callables(obs)


# ---------------------------------------------------------------------------
# population


@dataclass(frozen=True)
class Event:
    time: float
    kind: str
    trait: np.ndarray | None = None
    child: np.ndarray | None = None


class Population:
    """Particle configuration ``nu^n_t`` with cached aggregates.

    Columns of the cached sums are ``b, d, f_1..f_m, g_1..g_m``.
    """

    def __init__(self, spec: ModelSpec, traits, time: float = 0.0, record_log: bool = False,
                 backend: str | None = None):
        self.spec = spec
        self.n = spec.scale
        self.dim = spec.dim
        traits = np.asarray(traits, float).reshape(-1, spec.dim)
        if len(traits):
            spec.space.check(traits)
        self.initial_traits = traits.copy()
        self.t0 = float(time)
        self.core = get_core(backend)(pack(spec), traits, float(time), bool(record_log))

    @property
    def backend(self) -> str:
        return self.core.backend

    @property
    def size(self) -> int:
        return self.core.size

    @property
    def time(self) -> float:
        return self.core.time

    @property
    def events(self) -> int:
        return self.core.events

    @property
    def traits(self) -> np.ndarray:
        return self.core.traits

    @property
    def mass(self) -> float:
        return self.core.size / self.n

    @property
    def birth_sum(self) -> float:
        return float(self.core.cached_sums[0])

    @property
    def death_sum(self) -> float:
        return float(self.core.cached_sums[1])

    @property
    def factor_sums(self) -> tuple[np.ndarray, np.ndarray]:
        s = self.core.cached_sums
        m = self.spec.competition.m
        return s[2:2 + m], s[2 + m:2 + 2 * m]

    def coherence_error(self) -> np.ndarray:
        """Per-column |cached - fresh| scaled by ``max(|fresh|, column bound)``."""
        cached = self.core.cached_sums
        fresh = self.core.recompute_sums()
        scale = np.maximum(np.abs(fresh), np.maximum(self.core.bounds, 1e-300))
        return np.abs(cached - fresh) / scale

    def check_coherence(self, rtol: float = COHERENCE_RTOL, pairwise_limit: int = 2000) -> float:
        """Raise :class:`CacheCoherenceError` if cached sums drifted.

        For populations up to ``pairwise_limit`` atoms the competition total is
        also compared with the direct double sum over pairs.
        """
        err = self.coherence_error()
        worst = float(err.max()) if err.size else 0.0
        if worst > rtol:
            raise CacheCoherenceError(f"cached rate sums drifted: max relative error {worst:.3g}")
        if 0 < self.size <= pairwise_limit:
            x = self.traits
            direct = float(self.spec.competition(x, x, self.dim).sum()) / self.n
            _, _, c, _ = self.core.rates()
            rel = abs(direct - c) / max(abs(direct), 1e-300)
            if rel > rtol:
                raise CacheCoherenceError(f"competition total {c!r} vs pairwise {direct!r}")
            worst = max(worst, rel)
        return worst


def init_population(spec: ModelSpec, init: InitialCondition, rng: np.random.Generator | None = None,
                    record_log: bool = False, backend: str | None = None) -> Population:
    return Population(spec, init.place(spec, spec.scale, rng), 0.0, record_log, backend)


def total_rate(pop: Population) -> tuple[float, float, float, float]:
    """``(B, D, C, B + D + C)`` from the cached aggregates."""
    return tuple(float(v) for v in pop.core.rates())


def step(pop: Population, rng: np.random.Generator) -> Event | None:
    """Fire one event.  Returns ``None`` when the population is already extinct."""
    logged = pop.core.record
    before = pop.core.log_size if logged else 0
    kind = pop.core.step(rng)
    if kind < 0:
        return None
    if logged and pop.core.log_size > before:
        t, k, _, a, b = pop.core.log_entry(pop.core.log_size - 1)
        return Event(t, KIND_NAMES[k], a, None if k != KIND_BIRTH else b)
    return Event(pop.time, KIND_NAMES[kind])


@dataclass
class TransitionTable:
    """Probability that the next event is each (kind, individual) pair."""

    birth: np.ndarray
    natural_death: np.ndarray
    competition_death: np.ndarray
    total_rate: float

    def as_array(self) -> np.ndarray:
        return np.stack([self.birth, self.natural_death, self.competition_death])


def transition_probabilities(pop: Population) -> TransitionTable:
    """Fast-path probabilities from per-atom weights and cached factor sums."""
    w = pop.core.weights
    m = pop.spec.competition.m
    _, Sg = pop.factor_sums
    B, D, C, total = total_rate(pop)
    comp = (w[:, 2:2 + m] @ Sg) / pop.n
    return TransitionTable(w[:, 0] / total, w[:, 1] / total, comp / total, total)


def brute_force_transition_probabilities(spec: ModelSpec, traits) -> TransitionTable:
    """Direct enumeration of every individual rate, O(I^2) in point evaluations."""
    pts = as_points(traits, spec.dim)
    I = len(pts)
    b = np.array([eval_birth(spec, p) for p in pts])
    d = np.array([eval_death(spec, p) for p in pts])
    c = np.array([sum(eval_alpha(spec, pts[i], pts[j]) for j in range(I)) / spec.scale
                  for i in range(I)])
    total = b.sum() + d.sum() + c.sum()
    return TransitionTable(b / total, d / total, c / total, float(total))


# ---------------------------------------------------------------------------
# recorded paths


@dataclass
class MeasurePath:
    """Snapshots of ``<X^n_t, phi_j>`` together with the mass ``<X^n_t, 1>``."""

    times: np.ndarray
    names: list[str]
    values: np.ndarray
    mass: np.ndarray
    n: int

    def __post_init__(self):
        self.times = np.asarray(self.times, float)
        self.values = np.asarray(self.values, float).reshape(len(self.times), len(self.names))
        self.mass = np.asarray(self.mass, float)

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(name)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time", "mass", *self.names])
            for t, m, row in zip(self.times, self.mass, self.values):
                w.writerow([_fmt(t), _fmt(m), *(_fmt(v) for v in row)])

    @classmethod
    def from_csv(cls, path, n: int) -> "MeasurePath":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        head, body = rows[0], np.array(rows[1:], float).reshape(-1, len(rows[0]))
        return cls(body[:, 0], head[2:], body[:, 2:], body[:, 1], n)

    def to_dict(self) -> dict:
        return {"n": self.n, "names": self.names, "times": self.times.tolist(),
                "mass": self.mass.tolist(), "values": self.values.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "MeasurePath":
        return cls(np.array(d["times"]), list(d["names"]), np.array(d["values"]),
                   np.array(d["mass"]), int(d["n"]))


@dataclass
class EventLog:
    """Every event after time ``t0`` in firing order.

    ``slot`` is the engine array index of the parent (birth) or the victim
    (death, before the swap-with-last removal).  ``trait_b`` is the child
    trait for births and NaN otherwise.
    """

    n: int
    initial: np.ndarray
    t0: float
    time: np.ndarray
    kind: np.ndarray
    slot: np.ndarray
    trait_a: np.ndarray
    trait_b: np.ndarray

    @property
    def dim(self) -> int:
        return self.initial.shape[1]

    def __len__(self) -> int:
        return len(self.time)

    @classmethod
    def from_core(cls, pop: Population) -> "EventLog":
        lg = pop.core.log
        return cls(pop.n, pop.initial_traits, pop.t0, lg["time"], lg["kind"], lg["slot"],
                   lg["trait_a"], lg["trait_b"])

    def sizes(self) -> np.ndarray:
        """Population size right after each event."""
        jumps = np.where(self.kind == KIND_BIRTH, 1, -1)
        return len(self.initial) + np.cumsum(jumps)

    def replay(self, until: float | None = None) -> np.ndarray:
        """Apply the events to the initial population; returns the traits."""
        x = [row for row in np.array(self.initial, float)]
        for e in range(len(self.time)):
            if until is not None and self.time[e] > until:
                break
            i = int(self.slot[e])
            if i < 0 or i >= len(x) or not np.array_equal(x[i], self.trait_a[e]):
                raise ReplayError(f"event {e} does not match slot {i} of the replayed population")
            if self.kind[e] == KIND_BIRTH:
                x.append(np.array(self.trait_b[e]))
            else:
                last = x.pop()
                if i < len(x):
                    x[i] = last
        return np.array(x, float).reshape(-1, self.dim)

    def check_times(self) -> bool:
        return bool(np.all(np.diff(self.time) > 0)) and (len(self.time) == 0 or self.time[0] > self.t0)

    def to_csv(self, path) -> None:
        d = self.dim
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time", "kind", "slot", *(f"a{j}" for j in range(d)), *(f"b{j}" for j in range(d))])
            for e in range(len(self.time)):
                w.writerow([_fmt(self.time[e]), KIND_NAMES[self.kind[e]], int(self.slot[e]),
                            *(_fmt(v) for v in self.trait_a[e]), *(_fmt(v) for v in self.trait_b[e])])

    def to_dict(self) -> dict:
        return {"n": self.n, "t0": self.t0, "initial": self.initial.tolist(),
                "time": self.time.tolist(), "kind": [KIND_NAMES[k] for k in self.kind],
                "slot": self.slot.tolist(), "trait_a": self.trait_a.tolist(),
                "trait_b": [[None if math.isnan(v) else v for v in row] for row in self.trait_b.tolist()]}

    @classmethod
    def from_dict(cls, d: dict) -> "EventLog":
        dim = len(d["initial"][0]) if d["initial"] else len(d["trait_a"][0])
        kinds = np.array([KIND_NAMES.index(k) for k in d["kind"]], np.int8)
        tb = np.array([[math.nan if v is None else v for v in row] for row in d["trait_b"]], float)
        return cls(int(d["n"]), np.array(d["initial"], float).reshape(-1, dim), float(d["t0"]),
                   np.array(d["time"], float), kinds, np.array(d["slot"], np.int64),
                   np.array(d["trait_a"], float).reshape(-1, dim), tb.reshape(-1, dim))


def _fmt(v) -> str:
    return repr(float(v))


@dataclass
class SimulationResult:
    path: MeasurePath
    log: EventLog | None
    final_traits: np.ndarray
    events: int
    extinct: bool
    coherence: float
    backend: str
    counts: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))


# ---------------------------------------------------------------------------


def snapshot_times(T: float, snap_times=None) -> np.ndarray:
    if T < 0:
        raise ConfigError("horizon T must be nonnegative")
    if snap_times is None:
        return np.array([0.0]) if T == 0 else np.linspace(0.0, T, 11)
    ts = np.asarray(snap_times, float).ravel()
    if ts.size == 0 or np.any(np.diff(ts) <= 0) or ts[0] < 0 or ts[-1] > T * (1 + 1e-12):
        raise ConfigError("snap_times must be strictly increasing within [0, T]")
    return ts


def simulate(spec: ModelSpec, init: InitialCondition | np.ndarray, T: float, observables=None,
             snap_times: Sequence[float] | None = None, rng: np.random.Generator | None = None, *,
             init_rng: np.random.Generator | None = None, record_log: bool = True,
             event_budget: int = DEFAULT_EVENT_BUDGET, backend: str | None = None,
             debug: bool = False) -> SimulationResult:
    """Run one replica from time 0 to ``T``.

    ``init`` is an :class:`InitialCondition` or an explicit trait array.  The
    run is a deterministic function of the generator states.  Exceeding
    ``event_budget`` raises :class:`BudgetError` whose ``partial`` holds the
    snapshots completed so far.
    """
    if rng is None:
        raise ConfigError("simulate needs an explicit random stream")
    ts = snapshot_times(T, snap_times)
    obs = as_observables(observables)
    if isinstance(init, InitialCondition):
        traits = init.place(spec, spec.scale, init_rng if init_rng is not None else rng)
    else:
        traits = np.asarray(init, float).reshape(-1, spec.dim)
    pop = Population(spec, traits, 0.0, record_log, backend)
    core = pop.core
    n = spec.scale
    K = len(obs.names)
    vals = np.zeros((len(ts), K))
    mass = np.zeros(len(ts))
    counts = np.zeros(len(ts), np.int64)

    def partial(upto):
        path = MeasurePath(ts[:upto], obs.names, vals[:upto], mass[:upto], n)
        return SimulationResult(path, EventLog.from_core(pop) if record_log else None,
                                pop.traits, core.events, core.size == 0, float("nan"), pop.backend,
                                counts[:upto])

    for m, t in enumerate(ts):
        while True:
            cap = event_budget
            if debug:
                cap = min(event_budget, core.events + DEBUG_CHECK_EVERY)
            status = core.advance(float(t), rng, int(cap))
            if status != STATUS_BUDGET:
                break
            if core.events >= event_budget:
                raise BudgetError(f"event budget {event_budget} exhausted at t={core.time:.6g}",
                                  partial(m))
            pop.check_coherence(pairwise_limit=0)
        x = core.traits
        counts[m] = len(x)
        mass[m] = len(x) / n
        if len(x):
            vals[m] = obs.evaluate(x).sum(axis=0) / n
    coherence = pop.check_coherence(pairwise_limit=2000 if debug else 0)
    res = partial(len(ts))
    res.coherence = coherence
    return res


__all__ = [
    "InitialCondition", "Population", "Event", "TransitionTable", "MeasurePath", "EventLog",
    "SimulationResult", "init_population", "total_rate", "step", "transition_probabilities",
    "brute_force_transition_probabilities", "simulate", "stratified_unit_points",
    "as_observables", "snapshot_times", "KIND_BIRTH", "KIND_NATURAL_DEATH",
    "KIND_COMPETITION_DEATH", "DEFAULT_EVENT_BUDGET",
]
