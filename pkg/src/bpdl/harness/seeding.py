"""Deterministic per-replica random streams.

A stream seed is the first 16 bytes of ``blake2b(f"{master}:{replica}:{label}")``
(digest size 16, UTF-8 input) read as a little-endian unsigned integer.  The
seed feeds ``numpy.random.PCG64``.  Any implementation that hashes the same
string gets the same replica partition; the generator itself is not promised
to match across languages.
"""
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, replica: int, label: str) -> int:
    key = f"{int(master)}:{int(replica)}:{label}".encode("utf-8")
    return int.from_bytes(hashlib.blake2b(key, digest_size=16).digest(), "little")


def stream(master: int, replica: int, label: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(master, replica, label)))


def label_for(kind: str, n: int | None = None, extra: str = "") -> str:
    """Stream label such as ``events/n=400``; ``n`` keeps sample sizes independent."""
    out = kind if n is None else f"{kind}/n={int(n)}"
    return f"{out}/{extra}" if extra else out


__all__ = ["derive_seed", "stream", "label_for"]
