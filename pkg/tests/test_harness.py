import json
import subprocess
import sys

import numpy as np
import pytest

from bpdl.errors import ConfigError
from bpdl.harness import (KINDS, THRESHOLDS, bundled_config, derive_seed, from_dict, label_for, load_config,
                          rerun, resolve, run, stream)
from bpdl.harness.cli import main
from bpdl.harness.config import tomllib
from bpdl.harness.experiments import RunContext
from bpdl.harness.io import dumps, read_csv, write_csv
from bpdl.harness.runner import resolve_threads


def small_lln(**changes):
    with open(bundled_config("lln_convergence"), "rb") as fh:
        d = tomllib.load(fh)
    d.update(replicas=6, n=[50, 100], horizon=2.0, snapshots={"count": 21})
    d.update(changes)
    return from_dict(d)


def test_seed_derivation_has_no_collisions():
    seeds = {derive_seed(20261017, r, "events") for r in range(1_000_000)}
    assert len(seeds) == 1_000_000


def test_seed_derivation_is_a_pure_function():
    assert derive_seed(7, 3, "clt/n=250/events") == derive_seed(7, 3, "clt/n=250/events")
    assert derive_seed(7, 3, "a") != derive_seed(7, 3, "b")
    assert derive_seed(7, 3, "a") != derive_seed(8, 3, "a")
    assert derive_seed(1, 23, "x") != derive_seed(12, 3, "x")
    a, b = stream(1, 0, "x").random(5), stream(1, 0, "x").random(5)
    assert np.array_equal(a, b)
    assert label_for("clt", 250, "events") == "clt/n=250/events" and label_for("ou") == "ou"


def test_bundled_configs_load():
    for kind in KINDS:
        cfg = load_config(bundled_config(kind))
        assert cfg.kind == kind and cfg.seed == 20261017
        assert from_dict(cfg.to_dict()).content_hash() == cfg.content_hash()


@pytest.mark.parametrize("bad", [
    {"seed": None},
    {"kind": "nope"},
    {"colour": "blue"},
    {"tolerances": {"lln.nonsense": 1.0}},
    {"replicas": -1},
    {"snapshots": [0.0, 5.0, 3.0]},
    {"threads": 0},
])
def test_config_errors(bad):
    with open(bundled_config("lln_convergence"), "rb") as fh:
        d = tomllib.load(fh)
    for k, v in bad.items():
        if v is None:
            d.pop(k)
        else:
            d[k] = v
    with pytest.raises(ConfigError):
        from_dict(d)


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.toml")
    (tmp_path / "bad.toml").write_text("kind = \n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.toml")


def test_threshold_overrides():
    th = resolve({"lln.slope.high": -0.4})
    assert th["lln.slope"].high == -0.4 and THRESHOLDS["lln.slope"].high == -0.35
    with pytest.raises(KeyError):
        resolve({"lln.slope.bogus": 1})


def test_limit_only_report(tmp_path):
    res = run(small_lln(replicas=0), tmp_path)
    assert res.report["criteria"] == [] and res.report["failures"]["count"] == 0
    assert res.report["limit_vs_logistic"] < 1e-6
    assert (tmp_path / "report.json").exists() and (tmp_path / "manifest.json").exists()


def test_identical_runs_identical_outputs(tmp_path):
    cfg = small_lln()
    a = run(cfg, tmp_path / "a")
    b = run(cfg, tmp_path / "b")
    c = run(cfg, tmp_path / "c", threads=3)
    assert a.manifest["manifest_hash"] == b.manifest["manifest_hash"] == c.manifest["manifest_hash"]
    for name in a.manifest["outputs"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "c" / name).read_bytes()
    assert c.manifest["timing"]["threads"] == 3


def test_seed_changes_outputs(tmp_path):
    a = run(small_lln(), tmp_path / "a")
    b = run(small_lln(seed=5), tmp_path / "b")
    assert a.manifest["manifest_hash"] != b.manifest["manifest_hash"]


def test_manifest_records_streams(tmp_path):
    res = run(small_lln(), tmp_path)
    seeds = res.manifest["seeds"]
    assert set(seeds) == {"lln/n=50/init", "lln/n=50/events", "lln/n=100/init", "lln/n=100/events"}
    assert seeds["lln/n=50/events"][2] == str(derive_seed(20261017, 2, "lln/n=50/events"))


def test_rerun_reproduces(tmp_path):
    run(small_lln(), tmp_path / "a")
    res, diff = rerun(tmp_path / "a" / "manifest.json", tmp_path / "b")
    assert diff == []


def test_failed_replicas_are_counted(tmp_path):
    ctx = RunContext(tmp_path)

    def fn(r, rngs):
        if r == 2:
            raise RuntimeError("boom")
        return rngs["events"].random()

    out = ctx.map_replicas(fn, 1, 4, "x")
    assert out[2] is None and sum(v is not None for v in out) == 3
    assert ctx.failures == [{"label": "x", "replica": 2, "error": "RuntimeError: boom"}]


def test_thread_resolution(monkeypatch):
    monkeypatch.delenv("BPDL_THREADS", raising=False)
    assert resolve_threads(2) == 2
    monkeypatch.setenv("BPDL_THREADS", "4")
    assert resolve_threads(2) == 4
    assert resolve_threads(2, 1) == 1


def test_io_round_trip(tmp_path):
    p = write_csv(tmp_path / "x.csv", ["a", "b"], [[0.1, 1], [1 / 3, 2]])
    header, rows = read_csv(p)
    assert header == ["a", "b"] and float(rows[1][0]) == 1 / 3
    assert json.loads(dumps({"v": float("nan"), "w": np.float64(2.5)})) == {"v": "nan", "w": 2.5}


def test_cli_exit_codes(tmp_path, capsys):
    cfg_path = tmp_path / "lln.toml"
    with open(bundled_config("lln_convergence")) as fh:
        text = fh.read()
    cfg_path.write_text(text)
    code = main(["lln_convergence", "--config", str(cfg_path), "--out", str(tmp_path / "o"), "--replicas", "0"])
    assert code == 0
    assert "PASSED" in capsys.readouterr().out
    assert main(["ou_stationary", "--config", str(cfg_path), "--out", str(tmp_path / "p")]) == 2
    # an impossible tolerance fails the run
    cfg_path.write_text(text.replace("[model]", "[tolerances]\n\"lln.slope.high\" = -5.0\n\n[model]", 1))
    assert main(["lln_convergence", "--config", str(cfg_path), "--out", str(tmp_path / "q"),
                 "--replicas", "4"]) == 1
    assert main(["rerun", str(tmp_path / "o" / "manifest.json"), "--out", str(tmp_path / "r")]) == 0


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "bpdl.harness.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "lln_convergence" in out.stdout
