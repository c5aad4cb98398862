"""Acceptance suite: every bundled experiment at its stated tolerance.

Each bundled config runs once (module scope) with seed 20261017 fixed in the
config files.  Each test prints one ``PASS``/``FAIL`` line per criterion and
asserts the stated threshold directly on the observed values, so the checks do
not depend on the harness threshold table.
"""
import math
import time

import pytest

from bpdl.harness import bundled_config, load_config, run

pytestmark = pytest.mark.acceptance

_RUNS = {}


@pytest.fixture(scope="module")
def result(tmp_path_factory):
    def get(kind):
        if kind not in _RUNS:
            cfg = load_config(bundled_config(kind))
            t0 = time.perf_counter()
            res = run(cfg, tmp_path_factory.mktemp(kind))
            _RUNS[kind] = (res, time.perf_counter() - t0)
        return _RUNS[kind]
    return get


def rows(report, cid):
    out = [c for c in report["criteria"] if c["id"] == cid]
    assert out, f"report has no {cid} rows"
    return out


def verdict(number, ok, message):
    print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {message}")
    assert ok, message


def test_criterion_1_lln_rate(result):
    res, secs = result("lln_convergence")
    slope = rows(res.report, "lln.slope")[0]["observed"]
    ok = -0.65 <= slope <= -0.35 and res.report["failures"]["count"] == 0
    verdict(1, ok, f"log-log slope {slope:.4f} in [-0.65, -0.35] ({secs:.0f}s)")


def test_criterion_2_martingale(result):
    res, _ = result("martingale_check")
    parts = []
    ok = res.report["failures"]["count"] == 0
    for cid in ("martingale.mean", "martingale.bracket"):
        for c in rows(res.report, cid):
            se = c["detail"]["se"]
            ok &= abs(c["observed"]) <= 3 * se
            parts.append(f"{cid}[{c['detail']['test']}] z={c['observed'] / se:+.2f}")
    assert len(parts) == 4
    verdict(2, ok, "; ".join(parts))


def test_criterion_3_clt_covariance(result):
    res, secs = result("clt_covariance")
    cov = rows(res.report, "clt.covariance")
    ok = res.report["failures"]["count"] == 0
    ok &= {c["detail"]["t"] for c in cov} == {1.0, 3.0}
    ok &= all(c["observed"] <= 3.0 and c["detail"]["n"] == 4000 for c in cov)
    d = rows(res.report, "clt.discrepancy")[0]["detail"]
    ok &= d["discrepancy_large"] < d["discrepancy_small"]
    zs = ", ".join(f"t={c['detail']['t']:g}: max z={c['observed']:.2f}" for c in cov)
    verdict(3, ok, f"{zs}; discrepancy n=250 {d['discrepancy_small']:.2e} -> n=4000 "
                   f"{d['discrepancy_large']:.2e} ({secs:.0f}s)")


def test_criterion_4_gaussianity(result):
    res, _ = result("clt_covariance")
    diag = res.report["gaussianity"]
    skew = max(abs(v["skewness"]) for v in diag.values())
    kurt = max(abs(v["excess_kurtosis"]) for v in diag.values())
    ok = skew <= 0.25 and kurt <= 0.5 and len(diag) == 8
    verdict(4, ok, f"max |skewness| {skew:.3f} <= 0.25, max |excess kurtosis| {kurt:.3f} <= 0.5")


def test_criterion_5_ou(result):
    res, _ = result("ou_stationary")
    a = rows(res.report, "ou.analytic")[0]
    e = rows(res.report, "ou.empirical")[0]
    lyap = rows(res.report, "ou.lyapunov")[0]
    ok = a["observed"] <= 1e-4 and lyap["observed"] <= 1e-6
    ok &= abs(e["observed"] - 2.0) <= 3 * e["detail"]["se"]
    ok &= res.report["failures"]["count"] == 0
    verdict(5, ok, f"|V_20 - 2| {a['observed']:.2e}; empirical var {e['observed']:.4f} "
                   f"(se {e['detail']['se']:.4f}); Lyapunov gap {lyap['observed']:.2e}")


def test_criterion_6_tail_bound(result):
    res, _ = result("tail_bound_check")
    tails = rows(res.report, "tail.bound")
    gaps = rows(res.report, "tail.coupling")
    ok = len(tails) == 5 and len(gaps) == 5 and res.report["failures"]["count"] == 0
    for c in tails:
        th = c["threshold"]
        ok &= c["observed"] <= th["bound"] + 3 * th["se"]
        ok &= c["detail"].get("n") is not None
    ok &= all(g["observed"] is not None and g["observed"] >= 0 and g["detail"]["runs"] > 0 for g in gaps)
    worst = max(c["observed"] - c["threshold"]["bound"] for c in tails)
    verdict(6, ok, f"max (MC tail - bound) {worst:.2e} over 5 configs; "
                   f"min Yule-minus-particle gap {min(g['observed'] for g in gaps)}")


def test_criterion_7_meanfield(result):
    res, _ = result("meanfield_validation")
    r = rows(res.report, "meanfield.residual")[0]["observed"]
    o = rows(res.report, "meanfield.order")[0]["observed"]
    ratios = o if isinstance(o, list) else [o]
    lg = rows(res.report, "meanfield.logistic")[0]["observed"]
    ok = r <= 1e-8 and all(12 <= x <= 20 for x in ratios) and lg <= 1e-6
    verdict(7, ok, f"residual {r:.2e}; error ratio {', '.join(f'{x:.2f}' for x in ratios)}; "
                   f"logistic gap {lg:.2e}")


def test_criterion_8_engine(result):
    res, _ = result("engine_validation")
    oracle = rows(res.report, "engine.oracle")[0]
    coh = rows(res.report, "engine.coherence")[0]
    rep = rows(res.report, "engine.reproducible")[0]
    ok = oracle["observed"] <= 1e-12 and coh["pass"] and coh["detail"]["replay_matches"]
    ok &= rep["observed"] == 0 and rep["detail"]["comparisons"] > 0
    ok &= res.report["failures"]["count"] == 0
    verdict(8, ok, f"oracle gap {oracle['observed']:.1e}; coherence drift {coh['observed']:.1e}; "
                   f"{rep['observed']} byte mismatches in {rep['detail']['comparisons']} reruns")


def test_reports_pass_overall(result):
    for kind in ("lln_convergence", "martingale_check", "clt_covariance", "ou_stationary",
                 "tail_bound_check", "meanfield_validation", "engine_validation"):
        res, _ = result(kind)
        assert res.passed, kind
        assert not math.isnan(len(res.manifest["outputs"]))
