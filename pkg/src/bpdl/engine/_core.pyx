# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled event engine.

Mirrors ``_pycore.Core`` operation for operation; see that module for the
algorithm.  Draws go straight to the numpy bit generator of the supplied
``Generator`` so both engines consume identical random streams.
"""
from libc.stdlib cimport malloc, realloc, free
from libc.string cimport memcpy
from libc.math cimport exp, pow, floor, NAN
from cpython.pycapsule cimport PyCapsule_GetPointer

from numpy.random cimport bitgen_t
from numpy.random.c_distributions cimport (random_standard_uniform,
                                           random_standard_exponential,
                                           random_standard_normal)

import numpy as np

from ..errors import SamplingError

cdef long long MAX_SELECTION_TRIES = 100000000

cdef enum:
    ERR_NONE = 0
    ERR_SELECT = 1
    ERR_DISPERSE = 2
    ERR_MEMORY = 3


cdef inline double eval_field(int kind, const double* p, const double* x, int dim) noexcept nogil:
    cdef double s, r2, dx, pos, w, out
    cdef int j, corner, bit, nj, k, idx, base
    cdef int i0[8]
    cdef double t[8]
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
        return p[1] + p[0] * exp(-r2 / (2.0 * p[2] * p[2]))
    if kind == 4:
        s = p[0]
        for j in range(dim):
            s *= pow(x[j], p[1 + j])
        return s
    base = 3 * dim
    for j in range(dim):
        nj = <int>p[2 * dim + j]
        pos = (x[j] - p[j]) / (p[dim + j] - p[j]) * (nj - 1)
        k = <int>floor(pos)
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
            if bit:
                w *= t[j]
            else:
                w *= 1.0 - t[j]
            idx = idx * (<int>p[2 * dim + j]) + i0[j] + bit
        out += w * p[base + idx]
    return out


cdef class Core:
    """Mutable particle configuration with cached rate sums (C buffers)."""

    cdef readonly int dim, nf, m
    cdef double n
    cdef int disp_kind
    cdef double disp_scale
    cdef long long max_tries
    cdef double* lo
    cdef double* hi
    cdef int* kinds
    cdef long long* offs
    cdef double* params
    cdef double* x
    cdef double* w
    cdef double* sums
    cdef double* wmax
    cdef Py_ssize_t _size, cap
    cdef public double time
    cdef double t_next
    cdef bint has_next
    cdef readonly long long events
    cdef long long refresh_every
    cdef readonly bint record
    cdef double* lt
    cdef signed char* lk
    cdef long long* ls
    cdef double* la
    cdef double* lb
    cdef Py_ssize_t lsize, lcap
    cdef int err
    cdef object pm

    backend = "compiled"

    def __cinit__(self):
        self.lo = self.hi = self.params = self.x = self.w = self.sums = self.wmax = NULL
        self.kinds = NULL
        self.offs = NULL
        self.lt = self.la = self.lb = NULL
        self.lk = NULL
        self.ls = NULL

    def __init__(self, packed, traits, double time=0.0, bint record_log=False,
                 long long refresh_every=1000000):
        cdef Py_ssize_t i, j, N
        self.pm = packed
        self.dim = packed.dim
        self.nf = packed.nfields
        self.m = packed.m
        self.n = packed.n
        self.disp_kind = packed.disp_kind
        self.disp_scale = packed.disp_scale
        self.max_tries = packed.max_tries
        if self.dim > 8:
            raise ValueError("compiled engine supports trait dimension <= 8")
        self.lo = <double*>malloc(self.dim * sizeof(double))
        self.hi = <double*>malloc(self.dim * sizeof(double))
        self.kinds = <int*>malloc(self.nf * sizeof(int))
        self.offs = <long long*>malloc((self.nf + 1) * sizeof(long long))
        self.params = <double*>malloc(max(1, len(packed.params)) * sizeof(double))
        self.sums = <double*>malloc(self.nf * sizeof(double))
        self.wmax = <double*>malloc(self.nf * sizeof(double))
        for j in range(self.dim):
            self.lo[j] = packed.lower[j]
            self.hi[j] = packed.upper[j]
        for j in range(self.nf):
            self.kinds[j] = packed.kinds[j]
            self.wmax[j] = packed.wmax[j]
        for j in range(self.nf + 1):
            self.offs[j] = packed.offsets[j]
        for j in range(len(packed.params)):
            self.params[j] = packed.params[j]

        arr = np.ascontiguousarray(np.asarray(traits, dtype=float).reshape(-1, self.dim))
        cdef double[:, ::1] tv = arr
        N = tv.shape[0]
        self.cap = max(16, 2 * N)
        self.x = <double*>malloc(self.cap * self.dim * sizeof(double))
        self.w = <double*>malloc(self.cap * self.nf * sizeof(double))
        if self.x == NULL or self.w == NULL:
            raise MemoryError()
        self._size = N
        for i in range(N):
            for j in range(self.dim):
                self.x[i * self.dim + j] = tv[i, j]
            self._eval_row(&self.x[i * self.dim], &self.w[i * self.nf])
            self._raise_bounds(&self.w[i * self.nf])
        self._refresh()
        self.time = time
        self.has_next = False
        self.events = 0
        self.refresh_every = refresh_every
        self.record = record_log
        self.lsize = 0
        self.lcap = 0
        self.err = ERR_NONE

    def __dealloc__(self):
        free(self.lo); free(self.hi); free(self.kinds); free(self.offs); free(self.params)
        free(self.x); free(self.w); free(self.sums); free(self.wmax)
        free(self.lt); free(self.lk); free(self.ls); free(self.la); free(self.lb)

    # ------------------------------------------------------------------
    cdef inline void _eval_row(self, const double* xi, double* row) noexcept nogil:
        cdef int j
        for j in range(self.nf):
            row[j] = eval_field(self.kinds[j], &self.params[self.offs[j]], xi, self.dim)

    cdef inline void _raise_bounds(self, const double* row) noexcept nogil:
        cdef int j
        for j in range(self.nf):
            if row[j] > self.wmax[j]:
                self.wmax[j] = row[j]

    cdef void _refresh(self) noexcept nogil:
        cdef Py_ssize_t i
        cdef int j
        for j in range(self.nf):
            self.sums[j] = 0.0
        for i in range(self._size):
            for j in range(self.nf):
                self.sums[j] += self.w[i * self.nf + j]

    cdef int _grow(self) noexcept nogil:
        cdef Py_ssize_t newcap = 2 * self.cap
        cdef double* nx = <double*>realloc(self.x, newcap * self.dim * sizeof(double))
        if nx == NULL:
            return -1
        self.x = nx
        cdef double* nw = <double*>realloc(self.w, newcap * self.nf * sizeof(double))
        if nw == NULL:
            return -1
        self.w = nw
        self.cap = newcap
        return 0

    cdef int _log_event(self, int kind, Py_ssize_t slot, const double* a, const double* b) noexcept nogil:
        cdef Py_ssize_t newcap
        cdef int j
        if self.lsize == self.lcap:
            newcap = 1024 if self.lcap == 0 else 2 * self.lcap
            self.lt = <double*>realloc(self.lt, newcap * sizeof(double))
            self.lk = <signed char*>realloc(self.lk, newcap * sizeof(signed char))
            self.ls = <long long*>realloc(self.ls, newcap * sizeof(long long))
            self.la = <double*>realloc(self.la, newcap * self.dim * sizeof(double))
            self.lb = <double*>realloc(self.lb, newcap * self.dim * sizeof(double))
            if self.lt == NULL or self.lk == NULL or self.ls == NULL or self.la == NULL or self.lb == NULL:
                return -1
            self.lcap = newcap
        self.lt[self.lsize] = self.time
        self.lk[self.lsize] = kind
        self.ls[self.lsize] = slot
        for j in range(self.dim):
            self.la[self.lsize * self.dim + j] = a[j]
            self.lb[self.lsize * self.dim + j] = b[j] if b != NULL else NAN
        self.lsize += 1
        return 0

    cdef Py_ssize_t _select(self, int col, bitgen_t* bg) noexcept nogil:
        cdef Py_ssize_t i
        cdef long long tries
        cdef double bound = self.wmax[col]
        for tries in range(MAX_SELECTION_TRIES):
            i = <Py_ssize_t>(random_standard_uniform(bg) * self._size)
            if i >= self._size:
                i = self._size - 1
            if random_standard_uniform(bg) * bound < self.w[i * self.nf + col]:
                return i
        self.err = ERR_SELECT
        return -1

    cdef int _disperse(self, const double* xp, double* y, bitgen_t* bg) noexcept nogil:
        cdef long long tries
        cdef int j
        cdef double s = self.disp_scale, z, r2
        cdef bint ok
        for tries in range(self.max_tries):
            if self.disp_kind == 1:
                for j in range(self.dim):
                    y[j] = xp[j] + s * random_standard_normal(bg)
                ok = True
            else:
                r2 = 0.0
                for j in range(self.dim):
                    z = s * (2.0 * random_standard_uniform(bg) - 1.0)
                    r2 += z * z
                    y[j] = xp[j] + z
                ok = r2 <= s * s
            if ok:
                for j in range(self.dim):
                    if y[j] < self.lo[j] or y[j] > self.hi[j]:
                        ok = False
                        break
            if ok:
                return 0
        self.err = ERR_DISPERSE
        return -1

    cdef void _remove(self, Py_ssize_t i) noexcept nogil:
        cdef int j
        cdef Py_ssize_t last = self._size - 1
        for j in range(self.nf):
            self.sums[j] -= self.w[i * self.nf + j]
        if i < last:
            memcpy(&self.x[i * self.dim], &self.x[last * self.dim], self.dim * sizeof(double))
            memcpy(&self.w[i * self.nf], &self.w[last * self.nf], self.nf * sizeof(double))
        self._size = last
        if self._size == 0:
            for j in range(self.nf):
                self.sums[j] = 0.0

    cdef inline double _ctot(self) noexcept nogil:
        cdef double ctot = 0.0
        cdef int k
        for k in range(self.m):
            ctot += self.sums[2 + k] * self.sums[2 + self.m + k]
        return ctot

    cdef int _fire(self, bitgen_t* bg) noexcept nogil:
        cdef double* s = self.sums
        cdef int m = self.m, j, k, kk, kind, col
        cdef double ctot = self._ctot()
        cdef double c = ctot / self.n
        cdef double total = s[0] + s[1] + c
        cdef double u = random_standard_uniform(bg) * total
        cdef double v, acc
        cdef Py_ssize_t i, child
        if u < s[0]:
            i = self._select(0, bg)
            if i < 0:
                return -1
            if self._size == self.cap:
                if self._grow() != 0:
                    self.err = ERR_MEMORY
                    return -1
            child = self._size
            if self.disp_kind == 0:
                memcpy(&self.x[child * self.dim], &self.x[i * self.dim], self.dim * sizeof(double))
                memcpy(&self.w[child * self.nf], &self.w[i * self.nf], self.nf * sizeof(double))
            else:
                if self._disperse(&self.x[i * self.dim], &self.x[child * self.dim], bg) != 0:
                    return -1
                self._eval_row(&self.x[child * self.dim], &self.w[child * self.nf])
                self._raise_bounds(&self.w[child * self.nf])
            self._size += 1
            for j in range(self.nf):
                s[j] += self.w[child * self.nf + j]
            if self.record:
                if self._log_event(0, i, &self.x[i * self.dim], &self.x[child * self.dim]) != 0:
                    self.err = ERR_MEMORY
                    return -1
            kind = 0
        else:
            if u < s[0] + s[1] or ctot <= 0.0:
                kind = 1
                col = 1
            else:
                kind = 2
                k = 0
                if m > 1:
                    v = random_standard_uniform(bg) * ctot
                    acc = 0.0
                    k = m - 1
                    for kk in range(m):
                        acc += s[2 + kk] * s[2 + m + kk]
                        if v < acc:
                            k = kk
                            break
                col = 2 + k
            i = self._select(col, bg)
            if i < 0:
                return -1
            if self.record:
                if self._log_event(kind, i, &self.x[i * self.dim], NULL) != 0:
                    self.err = ERR_MEMORY
                    return -1
            self._remove(i)
        self.events += 1
        if self.events % self.refresh_every == 0:
            self._refresh()
        return kind

    cdef inline void _draw_next(self, bitgen_t* bg) noexcept nogil:
        cdef double c = self._ctot() / self.n
        cdef double total = self.sums[0] + self.sums[1] + c
        self.t_next = self.time + random_standard_exponential(bg) / total
        self.has_next = True

    cdef int _advance(self, double t_stop, long long cap, bitgen_t* bg) noexcept nogil:
        while True:
            if self._size == 0:
                if t_stop > self.time:
                    self.time = t_stop
                return 1
            if self.events >= cap:
                return 2
            if not self.has_next:
                self._draw_next(bg)
            if self.t_next > t_stop:
                self.time = t_stop
                return 0
            self.time = self.t_next
            self.has_next = False
            if self._fire(bg) < 0:
                return -1

    cdef void _raise_err(self):
        code = self.err
        self.err = ERR_NONE
        if code == ERR_SELECT:
            raise SamplingError("rejection selection stalled")
        if code == ERR_DISPERSE:
            raise SamplingError(f"dispersal rejected {self.max_tries} proposals")
        if code == ERR_MEMORY:
            raise MemoryError("event engine allocation failed")

    # public API ---------------------------------------------------------
    def advance(self, double t_stop, rng, long long event_cap):
        """Run events up to ``t_stop`` or until ``events == event_cap``."""
        cdef bitgen_t* bg
        cdef int status
        bitgen = rng.bit_generator
        bg = <bitgen_t*>PyCapsule_GetPointer(bitgen.capsule, "BitGenerator")
        with bitgen.lock:
            with nogil:
                status = self._advance(t_stop, event_cap, bg)
        if status < 0:
            self._raise_err()
        return status

    def step(self, rng):
        """Execute exactly one event; returns its kind, or -1 if extinct."""
        cdef bitgen_t* bg
        cdef int kind
        if self._size == 0:
            return -1
        bitgen = rng.bit_generator
        bg = <bitgen_t*>PyCapsule_GetPointer(bitgen.capsule, "BitGenerator")
        with bitgen.lock:
            with nogil:
                if not self.has_next:
                    self._draw_next(bg)
                self.time = self.t_next
                self.has_next = False
                kind = self._fire(bg)
        if kind < 0:
            self._raise_err()
        return kind

    def refresh(self):
        self._refresh()

    def recompute_sums(self):
        cdef Py_ssize_t i
        cdef int j
        out = np.zeros(self.nf)
        cdef double[::1] o = out
        for i in range(self._size):
            for j in range(self.nf):
                o[j] += self.w[i * self.nf + j]
        return out

    def rates(self):
        cdef double c = self._ctot() / self.n
        return self.sums[0], self.sums[1], c, self.sums[0] + self.sums[1] + c

    @property
    def size(self):
        return self._size

    @property
    def t_pending(self):
        return self.t_next if self.has_next else None

    @property
    def traits(self):
        out = np.empty((self._size, self.dim))
        cdef double[:, ::1] o = out
        if self._size:
            memcpy(&o[0, 0], self.x, self._size * self.dim * sizeof(double))
        return out

    @property
    def weights(self):
        out = np.empty((self._size, self.nf))
        cdef double[:, ::1] o = out
        if self._size:
            memcpy(&o[0, 0], self.w, self._size * self.nf * sizeof(double))
        return out

    @property
    def cached_sums(self):
        return np.array([self.sums[j] for j in range(self.nf)])

    @property
    def bounds(self):
        return np.array([self.wmax[j] for j in range(self.nf)])

    @property
    def log_size(self):
        return self.lsize

    def log_entry(self, Py_ssize_t i):
        """``(time, kind, slot, trait_a, trait_b)`` of logged event ``i``."""
        if i < 0:
            i += self.lsize
        if i < 0 or i >= self.lsize:
            raise IndexError(i)
        a = np.array([self.la[i * self.dim + j] for j in range(self.dim)])
        b = np.array([self.lb[i * self.dim + j] for j in range(self.dim)])
        return self.lt[i], int(self.lk[i]), int(self.ls[i]), a, b

    @property
    def log(self):
        cdef Py_ssize_t E = self.lsize, i, j
        t = np.empty(E)
        k = np.empty(E, dtype=np.int8)
        sl = np.empty(E, dtype=np.int64)
        a = np.empty((E, self.dim))
        b = np.empty((E, self.dim))
        for i in range(E):
            t[i] = self.lt[i]
            k[i] = self.lk[i]
            sl[i] = self.ls[i]
            for j in range(self.dim):
                a[i, j] = self.la[i * self.dim + j]
                b[i, j] = self.lb[i * self.dim + j]
        return {"time": t, "kind": k, "slot": sl, "trait_a": a, "trait_b": b}
