"""Flat, language-neutral encoding of a ModelSpec for the event engines."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..model import ModelSpec

KIND_BIRTH = 0
KIND_NATURAL_DEATH = 1
KIND_COMPETITION_DEATH = 2
KIND_NAMES = ("birth", "natural_death", "competition_death")

STATUS_REACHED = 0
STATUS_EXTINCT = 1
STATUS_BUDGET = 2


@dataclass(frozen=True)
class PackedModel:
    """Per-field kind codes and parameters in engine column order.

    Columns are ``b, d, f_1..f_m, g_1..g_m``; ``wmax`` holds the rejection
    bounds per column (lattice suprema, raised at runtime if exceeded).
    """

    dim: int
    n: float
    m: int
    lower: np.ndarray
    upper: np.ndarray
    kinds: np.ndarray
    offsets: np.ndarray
    params: np.ndarray
    disp_kind: int
    disp_scale: float
    max_tries: int
    wmax: np.ndarray

    @property
    def nfields(self) -> int:
        return 2 + 2 * self.m


def pack(spec: ModelSpec) -> PackedModel:
    """Encode ``spec``; memoized on the (immutable) spec instance."""
    cached = spec.__dict__.get("_packed")
    if cached is not None:
        return cached
    fields = spec.fields
    chunks = [f.pack(spec.dim) for f in fields]
    offsets = np.zeros(len(chunks) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([len(c) for c in chunks])
    packed = PackedModel(
        dim=spec.dim,
        n=float(spec.scale),
        m=spec.competition.m,
        lower=np.array(spec.space.lower, float),
        upper=np.array(spec.space.upper, float),
        kinds=np.array([f.kind for f in fields], dtype=np.int32),
        offsets=offsets,
        params=np.concatenate(chunks).astype(float),
        disp_kind=spec.dispersal.kind,
        disp_scale=float(spec.dispersal.scale),
        max_tries=int(spec.dispersal.max_tries),
        wmax=np.maximum(spec.field_sup, 0.0).astype(float),
    )
    spec.__dict__["_packed"] = packed
    return packed
