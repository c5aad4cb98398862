"""Pure-Python event engine.

Reference implementation of the compiled core in ``_core.pyx``.  Both draw
from the same numpy bit generator in the same order and perform the same
floating-point operations in the same order, so for a given seed they
produce bit-identical trajectories.

Per-event algorithm
-------------------
Every individual carries a weight row ``(b, d, f_1..f_m, g_1..g_m)`` evaluated
at its trait; column sums are cached.  The total rate is
``B + D + (1/n) sum_k Sf_k Sg_k``.  Within a category the acting individual is
chosen by rejection against a per-column bound: births and natural deaths
directly, competition deaths by first picking term ``k`` with probability
``Sf_k Sg_k / sum_j Sf_j Sg_j`` and then an individual with weight
``f_k(x_i)``.  That yields victim probabilities proportional to
``sum_k f_k(x_i) Sg_k``, self-interaction included.
"""
from __future__ import annotations

import math

import numpy as np

from ..errors import SamplingError
from .packing import (KIND_BIRTH, KIND_COMPETITION_DEATH, KIND_NATURAL_DEATH,
                      STATUS_BUDGET, STATUS_EXTINCT, STATUS_REACHED, PackedModel)

MAX_SELECTION_TRIES = 100_000_000


def eval_packed(kind: int, p, x, dim: int) -> float:
    """Scalar field evaluation; operation order mirrors the C engine."""
    if kind == 0:
        return p[0]
    if kind == 1:
        s = p[0]
        for j in range(dim):
            s += p[1 + j] * x[j]
        return s
    if kind == 2:
        r2 = 0.0
        for j in range(dim):
            dx = x[j] - p[3 + j]
            r2 += dx * dx
        return p[1] + p[0] * math.exp(-r2 / (2.0 * p[2] * p[2]))
    if kind == 4:
        s = p[0]
        for j in range(dim):
            s *= math.pow(x[j], p[1 + j])
        return s
    # multilinear interpolation on a regular lattice
    base = 3 * dim
    i0 = [0] * dim
    t = [0.0] * dim
    for j in range(dim):
        nj = int(p[2 * dim + j])
        pos = (x[j] - p[j]) / (p[dim + j] - p[j]) * (nj - 1)
        k = int(math.floor(pos))
        if k < 0:
            k = 0
        elif k > nj - 2:
            k = nj - 2
        i0[j] = k
        t[j] = pos - k
    out = 0.0
    for corner in range(1 << dim):
        w = 1.0
        idx = 0
        for j in range(dim):
            bit = (corner >> j) & 1
            w *= t[j] if bit else 1.0 - t[j]
            idx = idx * int(p[2 * dim + j]) + i0[j] + bit
        out += w * p[base + idx]
    return out


class Core:
    """Mutable particle configuration with cached rate sums."""

    backend = "python"

    def __init__(self, packed: PackedModel, traits, time: float = 0.0,
                 record_log: bool = False, refresh_every: int = 1_000_000):
        self.pm = packed
        self.dim = packed.dim
        self.nf = packed.nfields
        self.m = packed.m
        self.n = float(packed.n)
        self._params = [list(packed.params[packed.offsets[j]:packed.offsets[j + 1]])
                        for j in range(self.nf)]
        self._kinds = [int(k) for k in packed.kinds]
        self._lo = [float(v) for v in packed.lower]
        self._hi = [float(v) for v in packed.upper]
        traits = np.asarray(traits, float).reshape(-1, self.dim)
        self.x = [[float(v) for v in row] for row in traits]
        self.w = [self._row(xi) for xi in self.x]
        self.wmax = [float(v) for v in packed.wmax]
        for row in self.w:
            self._raise_bounds(row)
        self.sums = [0.0] * self.nf
        self.refresh()
        self.time = float(time)
        self.t_next = 0.0
        self.has_next = False
        self.events = 0
        self.refresh_every = int(refresh_every)
        self.record = bool(record_log)
        self._log = ([], [], [], [], [])

    # ------------------------------------------------------------------
    def _row(self, xi):
        return [eval_packed(self._kinds[j], self._params[j], xi, self.dim) for j in range(self.nf)]

    def _raise_bounds(self, row):
        wmax = self.wmax
        for j in range(self.nf):
            if row[j] > wmax[j]:
                wmax[j] = row[j]

    def refresh(self):
        """Recompute the cached sums from scratch (sequential order)."""
        sums = [0.0] * self.nf
        for row in self.w:
            for j in range(self.nf):
                sums[j] += row[j]
        self.sums = sums

    def recompute_sums(self) -> np.ndarray:
        sums = [0.0] * self.nf
        for row in self.w:
            for j in range(self.nf):
                sums[j] += row[j]
        return np.array(sums)

    # ------------------------------------------------------------------
    @property
    def size(self) -> int:
        return len(self.x)

    @property
    def traits(self) -> np.ndarray:
        return np.array(self.x, float).reshape(-1, self.dim)

    @property
    def weights(self) -> np.ndarray:
        return np.array(self.w, float).reshape(-1, self.nf)

    @property
    def cached_sums(self) -> np.ndarray:
        return np.array(self.sums)

    @property
    def bounds(self) -> np.ndarray:
        return np.array(self.wmax)

    def rates(self) -> tuple[float, float, float, float]:
        s = self.sums
        m = self.m
        ctot = 0.0
        for k in range(m):
            ctot += s[2 + k] * s[2 + m + k]
        c = ctot / self.n
        return s[0], s[1], c, s[0] + s[1] + c

    @property
    def log(self) -> dict:
        t, k, sl, a, b = self._log
        return {
            "time": np.array(t, float),
            "kind": np.array(k, np.int8),
            "slot": np.array(sl, np.int64),
            "trait_a": np.array(a, float).reshape(-1, self.dim),
            "trait_b": np.array(b, float).reshape(-1, self.dim),
        }

    @property
    def log_size(self) -> int:
        return len(self._log[0])

    def log_entry(self, i: int) -> tuple:
        """``(time, kind, slot, trait_a, trait_b)`` of logged event ``i``."""
        t, k, sl, a, b = self._log
        return t[i], k[i], sl[i], np.array(a[i]), np.array(b[i])

    # ------------------------------------------------------------------
    def _select(self, col: int, rng) -> int:
        size = len(self.x)
        bound = self.wmax[col]
        w = self.w
        for _ in range(MAX_SELECTION_TRIES):
            i = int(rng.random() * size)
            if i >= size:
                i = size - 1
            if rng.random() * bound < w[i][col]:
                return i
        raise SamplingError(f"rejection selection on column {col} stalled")

    def _disperse(self, xp, rng):
        dim = self.dim
        lo, hi = self._lo, self._hi
        s = self.pm.disp_scale
        kind = self.pm.disp_kind
        for _ in range(self.pm.max_tries):
            y = [0.0] * dim
            if kind == 1:
                for j in range(dim):
                    y[j] = xp[j] + s * rng.standard_normal()
                ok = True
            else:
                r2 = 0.0
                for j in range(dim):
                    z = s * (2.0 * rng.random() - 1.0)
                    r2 += z * z
                    y[j] = xp[j] + z
                ok = r2 <= s * s
            if ok:
                for j in range(dim):
                    if y[j] < lo[j] or y[j] > hi[j]:
                        ok = False
                        break
            if ok:
                return y
        raise SamplingError(f"dispersal from {xp} rejected {self.pm.max_tries} proposals")

    def _remove(self, i: int):
        row = self.w[i]
        sums = self.sums
        for j in range(self.nf):
            sums[j] -= row[j]
        last_x = self.x.pop()
        last_w = self.w.pop()
        if i < len(self.x):
            self.x[i] = last_x
            self.w[i] = last_w
        if not self.x:
            self.sums = [0.0] * self.nf

    def _fire(self, rng) -> int:
        s = self.sums
        m = self.m
        ctot = 0.0
        for k in range(m):
            ctot += s[2 + k] * s[2 + m + k]
        c = ctot / self.n
        total = s[0] + s[1] + c
        u = rng.random() * total
        if u < s[0]:
            kind = self._birth(rng)
        else:
            kind = self._death(rng, u < s[0] + s[1] or ctot <= 0.0, ctot)
        self.events += 1
        if self.events % self.refresh_every == 0:
            self.refresh()
        return kind

    def _birth(self, rng) -> int:
        s = self.sums
        i = self._select(0, rng)
        xp = self.x[i]
        if self.pm.disp_kind == 0:
            child = list(xp)
            row = list(self.w[i])
        else:
            child = self._disperse(xp, rng)
            row = self._row(child)
            self._raise_bounds(row)
        self.x.append(child)
        self.w.append(row)
        for j in range(self.nf):
            s[j] += row[j]
        if self.record:
            self._append_log(KIND_BIRTH, i, xp, child)
        return KIND_BIRTH

    def _death(self, rng, natural: bool, ctot: float) -> int:
        s = self.sums
        m = self.m
        if natural:
            kind = KIND_NATURAL_DEATH
            col = 1
        else:
            kind = KIND_COMPETITION_DEATH
            k = 0
            if m > 1:
                v = rng.random() * ctot
                acc = 0.0
                k = m - 1
                for kk in range(m):
                    acc += s[2 + kk] * s[2 + m + kk]
                    if v < acc:
                        k = kk
                        break
            col = 2 + k
        i = self._select(col, rng)
        if self.record:
            self._append_log(kind, i, self.x[i], None)
        self._remove(i)
        return kind

    def _append_log(self, kind, slot, a, b):
        t, k, sl, la, lb = self._log
        t.append(self.time)
        k.append(kind)
        sl.append(slot)
        la.append(list(a))
        lb.append(list(b) if b is not None else [math.nan] * self.dim)

    def _draw_next(self, rng) -> float:
        b, d, c, total = self.rates()
        self.t_next = self.time + rng.standard_exponential() / total
        self.has_next = True
        return self.t_next

    # public stepping ----------------------------------------------------
    def step(self, rng) -> int:
        """Execute exactly one event; returns its kind, or -1 if extinct."""
        if not self.x:
            return -1
        if not self.has_next:
            self._draw_next(rng)
        self.time = self.t_next
        self.has_next = False
        return self._fire(rng)

    def advance(self, t_stop: float, rng, event_cap: int) -> int:
        """Run events up to ``t_stop`` or until ``events == event_cap``."""
        while True:
            if not self.x:
                self.time = max(self.time, t_stop)
                return STATUS_EXTINCT
            if self.events >= event_cap:
                return STATUS_BUDGET
            if not self.has_next:
                self._draw_next(rng)
            if self.t_next > t_stop:
                self.time = t_stop
                return STATUS_REACHED
            self.time = self.t_next
            self.has_next = False
            self._fire(rng)
