"""Experiment configuration documents.

Configs are TOML.  Top-level keys::

    kind       = "clt_covariance"      # experiment kind, also the CLI subcommand
    seed       = 20261017              # master seed (required)
    replicas   = 500                   # R; 0 gives a limit-only report
    horizon    = 3.0                   # T
    n          = [250, 1000, 4000]     # scale parameters
    snapshots  = [0.0, 1.0, 3.0]       # or {count = 101} for an even grid on [0, T]
    output     = "runs/clt"            # output directory
    threads    = 1                     # worker threads

Tables::

    [model]        trait box, birth, death, competition terms, dispersal
    [initial]      mass, law, point, mode
    [[tests]]      one table per test function: name, family, parameters
    [meanfield]    nodes, dt, lyapunov_dt
    [tolerances]   "criterion.field" = value overrides of the threshold table
    [options]      kind-specific settings

Field families and dispersal kernels use the dictionaries accepted by
:meth:`bpdl.model.ModelSpec.from_dict`.
"""
from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError
from ..fluctuation import TestFunctionSet
from ..ibm_sim import InitialCondition
from ..model import ModelSpec, validate
from .thresholds import Threshold, resolve

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

KINDS = ("lln_convergence", "clt_covariance", "martingale_check", "ou_stationary",
         "tail_bound_check", "meanfield_validation", "engine_validation")

_TOP_KEYS = {"kind", "seed", "replicas", "horizon", "n", "snapshots", "output", "threads", "model",
             "initial", "tests", "meanfield", "tolerances", "options", "description"}


@dataclass
class ExperimentConfig:
    kind: str
    seed: int
    model: ModelSpec
    initial: InitialCondition | None
    n: list[int]
    replicas: int
    horizon: float
    snapshots: np.ndarray
    tests: TestFunctionSet
    output: str = "runs/out"
    threads: int = 1
    meanfield: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)
    description: str = ""

    @property
    def thresholds(self) -> dict[str, Threshold]:
        return resolve(self.tolerances)

    def spec_at(self, n: int) -> ModelSpec:
        return self.model.with_scale(int(n))

    def to_dict(self) -> dict:
        """Canonical form; :func:`from_dict` of it gives the same config."""
        out = {
            "kind": self.kind, "seed": self.seed, "replicas": self.replicas, "horizon": self.horizon,
            "n": list(self.n), "snapshots": [float(t) for t in self.snapshots], "output": self.output,
            "threads": self.threads, "model": self.model.to_dict(),
            "tests": self.tests.to_dicts(), "meanfield": dict(self.meanfield),
            "tolerances": dict(self.tolerances), "options": _plain(self.options),
        }
        out["model"].pop("scale", None)
        if self.initial is not None:
            out["initial"] = self.initial.to_dict()
        if self.description:
            out["description"] = self.description
        return out

    def content_hash(self) -> str:
        """Hash of the canonical form without the output directory and thread count."""
        d = self.to_dict()
        d.pop("output")
        d.pop("threads")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    return x


def _snapshots(raw, T: float) -> np.ndarray:
    if raw is None:
        return np.array([0.0, T]) if T > 0 else np.array([0.0])
    if isinstance(raw, dict):
        count = int(raw.get("count", 11))
        if count < 2:
            raise ConfigError("snapshot count must be at least 2")
        return np.linspace(float(raw.get("start", 0.0)), float(raw.get("stop", T)), count)
    ts = np.asarray(raw, float).ravel()
    if ts.size == 0 or np.any(np.diff(ts) <= 0) or ts[0] < 0 or ts[-1] > T * (1 + 1e-12):
        raise ConfigError("snapshots must be strictly increasing within [0, horizon]")
    return ts


def from_dict(d: dict, *, check_model: bool = True) -> ExperimentConfig:
    """Build and validate a config from a parsed document."""
    unknown = set(d) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kind = d.get("kind")
    if kind not in KINDS:
        raise ConfigError(f"unknown experiment kind {kind!r}; expected one of {KINDS}")
    if "seed" not in d:
        raise ConfigError("config must set a seed")
    seed = int(d["seed"])
    if seed < 0:
        raise ConfigError("seed must be nonnegative")
    if "model" not in d:
        raise ConfigError("config needs a [model] table")
    model = ModelSpec.from_dict({**d["model"], "scale": 1})
    if check_model:
        report = validate(model)
        if not report.ok:
            raise ConfigError("model fails validation: "
                              + "; ".join(f"{c.name} ({c.detail})" for c in report.failures()))
    initial = InitialCondition.from_dict(d["initial"]) if "initial" in d else None
    ns = d.get("n", [1])
    ns = [int(v) for v in (ns if isinstance(ns, (list, tuple)) else [ns])]
    if not ns or min(ns) < 1:
        raise ConfigError("n must list positive integers")
    replicas = int(d.get("replicas", 0))
    if replicas < 0:
        raise ConfigError("replicas must be nonnegative")
    T = float(d.get("horizon", 1.0))
    if T < 0:
        raise ConfigError("horizon must be nonnegative")
    snaps = _snapshots(d.get("snapshots"), T)
    tests = (TestFunctionSet.from_dicts(d["tests"], model.dim) if d.get("tests")
             else TestFunctionSet.default(model.dim))
    threads = int(d.get("threads", 1))
    if threads < 1:
        raise ConfigError("threads must be at least 1")
    tol = {str(k): float(v) for k, v in d.get("tolerances", {}).items()}
    try:
        resolve(tol)
    except KeyError as exc:
        raise ConfigError(str(exc)) from None
    return ExperimentConfig(kind, seed, model, initial, ns, replicas, T, snaps, tests,
                            str(d.get("output", f"runs/{kind}")), threads, dict(d.get("meanfield", {})),
                            tol, dict(d.get("options", {})), str(d.get("description", "")))


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_dict(doc)


def bundled_config(kind: str) -> Path:
    """Path of the packaged default config for ``kind``."""
    p = Path(__file__).resolve().parent.parent / "configs" / f"{kind}.toml"
    if not p.exists():
        raise ConfigError(f"no bundled config for {kind!r}")
    return p


__all__ = ["ExperimentConfig", "KINDS", "from_dict", "load_config", "bundled_config"]
