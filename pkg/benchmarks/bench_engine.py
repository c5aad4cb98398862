"""Compiled engine against the pure-Python fallback.

Runs the same replica on every available backend, asserts the outputs are
identical and reports events per second.

    python benchmarks/bench_engine.py [--n 2000] [--T 2.0] [--repeats 3]
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from bpdl.engine import available_backends
from bpdl.ibm_sim import InitialCondition, simulate
from bpdl.model import DispersalKernel, ModelSpec, ScalarField, SeparableKernel, TraitSpace


def bench_model(n: int) -> ModelSpec:
    return ModelSpec(
        TraitSpace((0.0,), (1.0,)),
        ScalarField.gaussian_bump([0.5], 0.2, 1.0, 1.0),
        ScalarField.constant(0.5),
        SeparableKernel(((ScalarField.affine([0.5], 0.5), ScalarField.gaussian_bump([0.3], 0.3, 1.0, 0.2)),)),
        DispersalKernel("truncated_gaussian", 0.1),
        scale=n,
    )


def run_once(spec, T, backend, seed):
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    res = simulate(spec, InitialCondition(0.5), T, None, np.linspace(0, T, 5), rng, backend=backend)
    return time.perf_counter() - t0, res


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--T", type=float, default=2.0)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args(argv)
    spec = bench_model(args.n)
    backends = available_backends()
    ref = None
    rows = []
    for be in backends:
        best, res = min((run_once(spec, args.T, be, args.seed) for _ in range(args.repeats)), key=lambda x: x[0])
        sig = (res.path.mass.tobytes(), res.final_traits.tobytes(), res.log.time.tobytes())
        if ref is None:
            ref = sig
        assert sig == ref, f"backend {be} output differs"
        rows.append((be, res.events, best))
    base = dict((be, t) for be, _, t in rows).get("python")
    print(f"n={args.n} T={args.T} events={rows[0][1]}")
    for be, ev, t in rows:
        speed = f"  x{base / t:.1f}" if base else ""
        print(f"{be:>9}: {t:8.4f} s  {ev / t:12.0f} events/s{speed}")
    print("outputs identical across backends" if len(rows) > 1 else "only one backend available")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
