"""Event engine backends.

The compiled core is used when it imports; ``BPDL_BACKEND=python`` forces the
pure-Python reference.  Both expose the same ``Core`` class interface and give
bit-identical trajectories for the same generator state.
"""
from __future__ import annotations

import os

from . import _pycore
from .packing import (KIND_BIRTH, KIND_COMPETITION_DEATH, KIND_NAMES, KIND_NATURAL_DEATH,
                      STATUS_BUDGET, STATUS_EXTINCT, STATUS_REACHED, PackedModel, pack)

try:
    from . import _core as _ccore
except ImportError:  # extension not built
    _ccore = None

BACKENDS = ("compiled", "python")


def available_backends() -> list[str]:
    return [b for b in BACKENDS if b == "python" or _ccore is not None]


def default_backend() -> str:
    forced = os.environ.get("BPDL_BACKEND", "").strip().lower()
    if forced == "python" or _ccore is None:
        return "python"
    return "compiled"


def get_core(backend: str | None = None):
    """Return the ``Core`` class for ``backend`` (default: best available)."""
    backend = backend or default_backend()
    if backend == "python":
        return _pycore.Core
    if backend == "compiled":
        if _ccore is None:
            raise ImportError("compiled engine is not built")
        return _ccore.Core
    raise ValueError(f"unknown backend {backend!r}")


__all__ = [
    "KIND_BIRTH", "KIND_NATURAL_DEATH", "KIND_COMPETITION_DEATH", "KIND_NAMES",
    "STATUS_REACHED", "STATUS_EXTINCT", "STATUS_BUDGET", "PackedModel", "pack",
    "available_backends", "default_backend", "get_core",
]
