"""Command line entry point: ``bpdl <kind> [--config PATH] [--out DIR] ...``."""
from __future__ import annotations

import argparse
import sys

from ..errors import BPDLError
from .config import KINDS, bundled_config, from_dict, load_config
from .runner import rerun, run


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bpdl", description="Run population-limit experiments.")
    sub = p.add_subparsers(dest="kind", required=True)
    for kind in KINDS:
        s = sub.add_parser(kind, help=f"run a {kind} experiment")
        s.add_argument("--config", help="TOML config (default: the bundled config for this kind)")
        s.add_argument("--out", help="output directory (overrides the config)")
        s.add_argument("--seed", type=int, help="master seed (overrides the config)")
        s.add_argument("--replicas", type=int, help="replica count R (overrides the config)")
        s.add_argument("--threads", type=int, help="worker threads (overrides BPDL_THREADS and the config)")
    r = sub.add_parser("rerun", help="re-run from a manifest and compare output hashes")
    r.add_argument("manifest")
    r.add_argument("--out", required=True)
    r.add_argument("--threads", type=int)
    return p


def _summary(res) -> str:
    lines = []
    for c in res.report["criteria"]:
        extra = c.get("detail", {})
        tag = " ".join(f"{k}={extra[k]}" for k in ("test", "t", "config") if k in extra)
        lines.append(f"{'PASS' if c['pass'] else 'FAIL'}  {c['id']:<22} observed={c['observed']!r} {tag}".rstrip())
    f = res.report["failures"]["count"]
    if f:
        lines.append(f"FAIL  {f} replica(s) raised errors")
    lines.append(f"{'PASSED' if res.passed else 'FAILED'}  outputs in {res.out}")
    return "\n".join(lines)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.kind == "rerun":
            res, diff = rerun(args.manifest, args.out, args.threads)
            print(_summary(res))
            for name in diff:
                print(f"DIFF  {name}")
            return 0 if res.passed and not diff else 1
        cfg = load_config(args.config or bundled_config(args.kind))
        if cfg.kind != args.kind:
            print(f"config kind {cfg.kind!r} does not match subcommand {args.kind!r}", file=sys.stderr)
            return 2
        if args.seed is not None or args.replicas is not None:
            d = cfg.to_dict()
            if args.seed is not None:
                d["seed"] = args.seed
            if args.replicas is not None:
                d["replicas"] = args.replicas
            cfg = from_dict(d)
        res = run(cfg, args.out, args.threads)
    except BPDLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(_summary(res))
    return 0 if res.passed else 1


if __name__ == "__main__":
    sys.exit(main())
