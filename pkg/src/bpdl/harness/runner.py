"""Run an experiment end to end and write its report and manifest."""
from __future__ import annotations

import hashlib
import os
import time
from dataclasses import dataclass
from pathlib import Path

from .. import __version__
from ..engine import default_backend
from .config import ExperimentConfig, from_dict
from .experiments import KIND_RUNNERS, RunContext
from .io import dumps, inventory, read_json, write_json

THREADS_ENV = "BPDL_THREADS"


@dataclass
class RunResult:
    out: Path
    report: dict
    manifest: dict

    @property
    def passed(self) -> bool:
        return bool(self.report["passed"])


def resolve_threads(cfg_threads: int, cli_threads: int | None = None) -> int:
    """Thread count: CLI flag, then ``BPDL_THREADS``, then the config."""
    if cli_threads is not None:
        return max(1, int(cli_threads))
    env = os.environ.get(THREADS_ENV)
    if env:
        return max(1, int(env))
    return max(1, int(cfg_threads))


def manifest_hash(manifest: dict) -> str:
    """Hash over everything that must match between reproducing runs (not timing)."""
    core = {k: manifest[k] for k in ("config_hash", "code_version", "seeds", "outputs")}
    return hashlib.sha256(dumps(core).encode()).hexdigest()


def run(cfg: ExperimentConfig, out=None, threads: int | None = None) -> RunResult:
    out = Path(out if out is not None else cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    ctx = RunContext(out, resolve_threads(cfg.threads, threads))
    t0 = time.perf_counter()
    body = KIND_RUNNERS[cfg.kind](cfg, ctx)
    elapsed = time.perf_counter() - t0
    criteria = body.pop("criteria", [])
    report = {
        "kind": cfg.kind,
        "config_hash": cfg.content_hash(),
        "replicas": cfg.replicas,
        "failures": {"count": len(ctx.failures), "replicas": ctx.failures},
        "criteria": criteria,
        "passed": bool(all(c["pass"] for c in criteria) and not ctx.failures),
        **body,
    }
    ctx.files.append(write_json(out / "report.json", report))
    seeds = {label: [str(by_rep[r]) for r in sorted(by_rep)] for label, by_rep in sorted(ctx.seeds.items())}
    manifest = {
        "config": cfg.to_dict(),
        "config_hash": cfg.content_hash(),
        "code_version": __version__,
        "backend": default_backend(),
        "seeds": seeds,
        "timing": {"seconds": elapsed, "threads": ctx.threads},
        "outputs": inventory(out, ctx.files),
    }
    manifest["manifest_hash"] = manifest_hash(manifest)
    write_json(out / "manifest.json", manifest)
    return RunResult(out, report, manifest)


def rerun(manifest_path, out, threads: int | None = None) -> tuple[RunResult, list[str]]:
    """Re-run from a manifest; returns the result and the files whose hashes differ."""
    old = read_json(manifest_path)
    cfg = from_dict(old["config"])
    res = run(cfg, out, threads)
    new = res.manifest["outputs"]
    diff = sorted(k for k in set(old["outputs"]) | set(new) if old["outputs"].get(k) != new.get(k))
    return res, diff


__all__ = ["RunResult", "run", "rerun", "manifest_hash", "resolve_threads", "THREADS_ENV"]
