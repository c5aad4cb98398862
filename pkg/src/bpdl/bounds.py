"""Explicit tail bounds for the total mass via domination by a Yule process.

Every individual gives birth at rate at most ``b_bar`` and deaths only lower
the count, so the population is dominated pathwise by a pure birth process of
per-capita rate ``b_bar``.  The bounds below are stated for unit rate; a
general ``b_bar`` enters through the time change ``s -> b_bar s``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .engine import pack
from .engine._pycore import Core as _PyCore
from .errors import BudgetError, InapplicableBoundError, PreconditionError
from .model import ModelSpec

YULE_CAP = 10_000_000


def floor_A(A: float) -> int:
    """Integer part ``[A]``, read as the floor.

    For integer ``A`` the strict reading "largest integer below A" would give
    ``A - 1``; the floor is used uniformly.
    """
    return int(math.floor(A))


@dataclass(frozen=True)
class InitialMassLaw:
    """Law of the initial count ``n <X^n_0, 1>`` as ``{count: probability}``."""

    probs: Mapping[int, float]

    @classmethod
    def deterministic(cls, count: int) -> "InitialMassLaw":
        return cls({int(count): 1.0})

    @classmethod
    def from_mass(cls, mass: float, n: int) -> "InitialMassLaw":
        return cls.deterministic(int(math.floor(n * mass + 0.5)))

    @classmethod
    def empirical(cls, counts) -> "InitialMassLaw":
        vals, freq = np.unique(np.asarray(counts, int), return_counts=True)
        return cls({int(v): float(f) / len(counts) for v, f in zip(vals, freq)})

    def prob_eq(self, m: int) -> float:
        return float(self.probs.get(m, 0.0))

    def prob_mass_above(self, x: float, n: int) -> float:
        """``P(<X^n_0, 1> > x)``."""
        return float(sum(p for m, p in self.probs.items() if m / n > x))


def _law(initial, n: int) -> InitialMassLaw:
    if isinstance(initial, InitialMassLaw):
        return initial
    if isinstance(initial, Mapping):
        return InitialMassLaw({int(k): float(v) for k, v in initial.items()})
    return InitialMassLaw.from_mass(float(initial), n)


@dataclass(frozen=True)
class TailBound:
    value: float
    raw: float
    clamped: bool
    A: float
    floor_A: int
    j: int
    detail: dict = field(default_factory=dict)


def tail_bound_general(A: float, s: float, n: int, beta: float | None = None, initial=0.0,
                       j: int | None = None, birth_rate: float = 1.0,
                       form: str = "displayed") -> TailBound:
    """Finite-sum bound on ``P(<X^n_s, 1> > A)``.

    ``form="displayed"``: ``sum_{m=0}^{n j} exp((n - m/[A]) (s - ln(1 + [A] (1 - 1/[A]) / (1 + 1/n))))
    P(n X_0 = m) + P(X_0 > j)`` with ``j = [beta A]`` unless given.

    ``form="chernoff"`` keeps the per-term Chernoff estimate before its final
    simplification, ``exp(lam (s - ln((m + k + 1 + lam) / (m + 1 + lam))))``
    with ``k = [A] n - m`` and ``lam = k / [A]``.  The displayed form replaces
    the denominator ``m + 1 + lam`` by ``lam + 1``, which is only valid for ``m``
    small compared with ``[A] n``.

    Values above one are clamped and flagged.
    """
    if not A > 0 or n < 1:
        raise PreconditionError("need A > 0 and n >= 1")
    fa = floor_A(A)
    if j is None:
        if beta is None or not 0 < beta < 1:
            raise PreconditionError("need beta in (0, 1) or an explicit j")
        j = floor_A(beta * A)
    if not j < fa:
        raise PreconditionError(f"need j < [A]; got j={j}, [A]={fa}")
    law = _law(initial, n)
    se = birth_rate * s
    if form not in ("displayed", "chernoff"):
        raise PreconditionError(f"unknown bound form {form!r}")
    rate = se - math.log1p(fa * (1.0 - 1.0 / fa) / (1.0 + 1.0 / n))
    total = 0.0
    for m, p in law.probs.items():
        if 0 <= m <= n * j and p > 0:
            if form == "displayed":
                total += math.exp((n - m / fa) * rate) * p
            else:
                k = fa * n - m
                lam = k / fa
                total += math.exp(lam * (se - math.log((m + k + 1 + lam) / (m + 1 + lam)))) * p
    total += law.prob_mass_above(j, n)
    return TailBound(min(total, 1.0), total, total > 1.0, A, fa, j, {"exponent_rate": rate})


def exp_bound_conditions(s: float, t: float, n: int, birth_rate: float = 1.0) -> dict:
    """Largeness conditions of the exponential form with ``A = 2 e^{s+t} - 2``."""
    se = birth_rate * s
    A = 2.0 * math.exp(se + t) - 2.0
    fa = floor_A(A)
    lhs = fa * (1.0 - 1.0 / fa) / (1.0 + 1.0 / n) if fa >= 1 else float("-inf")
    c1 = lhs > A / 2
    c2 = fa >= 1 and se - math.log1p(fa / 2) < 0
    return {"A": A, "floor_A": fa, "size_condition": bool(c1), "time_condition": bool(c2),
            "lhs": lhs, "half_A": A / 2}


def tail_bound_exp(s: float, t: float, n: int, beta: float, initial=0.0,
                   birth_rate: float = 1.0) -> TailBound:
    """``P(<X^n_s, 1> > A) <= exp(-n (1 - beta) t) + P(X_0 > [beta A])``, ``A = 2 e^{s+t} - 2``.

    Raises :class:`InapplicableBoundError` when the largeness conditions fail.
    """
    if not 0 < beta < 1 or not t > 0 or n < 1:
        raise PreconditionError("need 0 < beta < 1, t > 0 and n >= 1")
    cond = exp_bound_conditions(s, t, n, birth_rate)
    if not (cond["size_condition"] and cond["time_condition"]):
        raise InapplicableBoundError(f"exponential tail bound inapplicable: {cond}")
    A = cond["A"]
    j = floor_A(beta * A)
    law = _law(initial, n)
    raw = math.exp(-n * (1.0 - beta) * t) + law.prob_mass_above(j, n)
    return TailBound(min(raw, 1.0), raw, raw > 1.0, A, cond["floor_A"], j, cond)


# ---------------------------------------------------------------------------
# Monte Carlo


def pure_birth_mass_sim(bbar: float, m0: int, s: float, rng: np.random.Generator,
                        cap: int = YULE_CAP) -> int:
    """Yule count at time ``s`` from ``m0``, via sequential exponential clocks."""
    if m0 < 1:
        raise PreconditionError("need m0 >= 1")
    if s <= 0:
        return int(m0)
    m = int(m0)
    t = 0.0
    while True:
        # draw a block of waiting times; the rate at level m + i is bbar (m + i)
        k = max(16, int(m * math.expm1(bbar * max(s - t, 0.0)) * 1.5) + 16)
        levels = m + np.arange(k)
        waits = rng.standard_exponential(k) / (bbar * levels)
        cum = t + np.cumsum(waits)
        hit = int(np.searchsorted(cum, s, side="right"))
        if hit < k:
            m += hit
            break
        m += k
        t = float(cum[-1])
        if m > cap:
            raise BudgetError(f"Yule count exceeded {cap}", partial=m)
    if m > cap:
        raise BudgetError(f"Yule count exceeded {cap}", partial=m)
    return m


def pure_birth_tail(bbar: float, m0: int, s: float, threshold: float, n: int, replicas: int,
                    rng: np.random.Generator) -> tuple[float, float]:
    """Monte Carlo ``P(count / n > threshold)`` and its binomial standard error."""
    hits = sum(pure_birth_mass_sim(bbar, m0, s, rng) / n > threshold for _ in range(replicas))
    p = hits / replicas
    return p, math.sqrt(max(p * (1 - p), 0.0) / replicas)


def binomial_se(p: float, R: int) -> float:
    return math.sqrt(max(p * (1.0 - p), 0.0) / R)


@dataclass
class CoupledRun:
    times: np.ndarray
    yule: np.ndarray
    bpdl: np.ndarray

    @property
    def dominated(self) -> bool:
        return bool(np.all(self.yule >= self.bpdl))


def coupled_run(spec: ModelSpec, traits, s: float, rng: np.random.Generator,
                cap: int = YULE_CAP) -> CoupledRun:
    """Joint path of the particle process and its dominating Yule process.

    One exponential clock of rate ``b_bar N_Y + D + C`` drives both: a Yule
    birth fires with probability ``b_bar N_Y / R`` and is shared with the
    particle process with probability ``B / (b_bar N_Y)``; otherwise a
    particle death fires.  Both marginals have their own law and
    ``N_Y >= N`` holds at every event.
    """
    bbar = spec.b_bar
    core = _PyCore(pack(spec), np.asarray(traits, float).reshape(-1, spec.dim))
    ny = core.size
    t = 0.0
    times, ys, bs = [0.0], [ny], [core.size]
    while True:
        B, D, C, _ = core.rates()
        R = bbar * ny + D + C
        if R <= 0:
            break
        t += rng.standard_exponential() / R
        if t > s:
            break
        u = rng.random() * R
        if u < bbar * ny:
            if rng.random() * bbar * ny < B:
                core._birth(rng)
            ny += 1
        else:
            v = u - bbar * ny
            sums = core.sums
            ctot = sum(sums[2 + k] * sums[2 + core.m + k] for k in range(core.m))
            core._death(rng, v < D or ctot <= 0.0, ctot)
        core.events += 1
        times.append(t)
        ys.append(ny)
        bs.append(core.size)
        if ny > cap:
            raise BudgetError(f"coupled Yule count exceeded {cap}")
    return CoupledRun(np.array(times), np.array(ys), np.array(bs))


def bound_table(configs, initial_mass=None) -> list[dict]:
    """Rows of ``(n, s, t, beta, A, [A], j, exp bound, general bound)``."""
    rows = []
    for cfg in configs:
        n, s, t, beta = cfg["n"], cfg["s"], cfg["t"], cfg["beta"]
        init = cfg.get("initial_mass", initial_mass if initial_mass is not None else 0.0)
        br = cfg.get("birth_rate", 1.0)
        row = {"n": n, "s": s, "t": t, "beta": beta, "birth_rate": br}
        try:
            e = tail_bound_exp(s, t, n, beta, init, br)
            row.update(A=e.A, floor_A=e.floor_A, j=e.j, exp_bound=e.value, applicable=True)
            g = tail_bound_general(e.A, s, n, beta, init, birth_rate=br)
            row.update(general_bound=g.value)
        except InapplicableBoundError as exc:
            row.update(applicable=False, reason=str(exc))
        rows.append(row)
    return rows


__all__ = [
    "floor_A", "InitialMassLaw", "TailBound", "tail_bound_general", "tail_bound_exp",
    "exp_bound_conditions", "pure_birth_mass_sim", "pure_birth_tail", "binomial_se", "CoupledRun",
    "coupled_run", "bound_table",
]
