"""Acceptance thresholds, all in one table.

Each entry is keyed by a criterion id.  ``k_se`` entries compare an estimate
with its target in units of standard error; ``low``/``high`` entries bound an
observed value; ``tol`` entries bound an absolute error.
"""
from __future__ import annotations

from dataclasses import dataclass, replace


@dataclass(frozen=True)
class Threshold:
    criterion: str
    description: str
    low: float | None = None
    high: float | None = None
    tol: float | None = None
    k_se: float | None = None

    def check_range(self, x: float) -> bool:
        ok = x == x  # NaN fails
        if self.low is not None:
            ok = ok and x >= self.low
        if self.high is not None:
            ok = ok and x <= self.high
        return bool(ok)

    def check_tol(self, err: float) -> bool:
        return bool(err == err and abs(err) <= self.tol)

    def check_se(self, diff: float, se: float) -> bool:
        return bool(diff == diff and abs(diff) <= self.k_se * se)

    def as_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


_TABLE = [
    Threshold("lln.slope", "log-log slope of mean sup |mass - limit| against n", low=-0.65, high=-0.35),
    Threshold("martingale.mean", "|mean M_T(phi)| in standard errors", k_se=3.0),
    Threshold("martingale.bracket", "|mean([M]_T - <M>_T)| in standard errors", k_se=3.0),
    Threshold("clt.covariance", "empirical minus limit covariance, entrywise, in jackknife SE", k_se=3.0),
    Threshold("clt.discrepancy", "bias-corrected discrepancy at largest n minus at smallest n", high=0.0),
    Threshold("clt.skewness", "|skewness| of each projected fluctuation", high=0.25),
    Threshold("clt.kurtosis", "|excess kurtosis| of each projected fluctuation", high=0.5),
    Threshold("ou.analytic", "|V_T - b/alpha|", tol=1e-4),
    Threshold("ou.empirical", "sample variance of eta_T against b/alpha, in jackknife SE", k_se=3.0),
    Threshold("ou.lyapunov", "grid Lyapunov variance against the one-trait V_t", tol=1e-6),
    Threshold("tail.bound", "Monte Carlo tail minus bound, in binomial SE", k_se=3.0),
    Threshold("tail.coupling", "pure-birth count minus particle count along coupled paths", low=0.0),
    Threshold("meanfield.residual", "weak-form residual on random test functions", tol=1e-8),
    Threshold("meanfield.order", "RK4 self-convergence error ratio under dt halving", low=12.0, high=20.0),
    Threshold("meanfield.logistic", "degenerate mass path against the logistic solution", tol=1e-6),
    Threshold("engine.oracle", "transition probabilities against brute force", tol=1e-12),
    Threshold("engine.coherence", "relative drift of cached rate sums", tol=1e-9),
    Threshold("engine.reproducible", "byte mismatches between identical runs", tol=0.0),
]

THRESHOLDS: dict[str, Threshold] = {t.criterion: t for t in _TABLE}


def resolve(overrides: dict | None = None) -> dict[str, Threshold]:
    """Table with ``{"criterion.field": value}`` overrides applied."""
    table = dict(THRESHOLDS)
    for key, value in (overrides or {}).items():
        crit, _, fld = key.rpartition(".")
        if crit not in table or fld not in ("low", "high", "tol", "k_se"):
            raise KeyError(f"unknown threshold override {key!r}")
        table[crit] = replace(table[crit], **{fld: float(value)})
    return table


__all__ = ["Threshold", "THRESHOLDS", "resolve"]
