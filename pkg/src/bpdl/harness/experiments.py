"""Experiment kinds.

Each kind takes an :class:`ExperimentConfig` and a :class:`RunContext` and
returns a report dictionary.  Replicas run through ``ctx.map_replicas`` which
hands every replica its own random streams and records failures instead of
raising; aggregation always walks replicas in index order.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .. import bounds, fluctuation, meanfield, ou1d
from ..engine import available_backends
from ..errors import ConfigError, InapplicableBoundError
from ..ibm_sim import (EventLog, InitialCondition, Population, brute_force_transition_probabilities,
                       simulate, transition_probabilities)
from ..model import DispersalKernel, ModelSpec, ScalarField, SeparableKernel
from .config import ExperimentConfig
from .io import write_csv
from .seeding import derive_seed, label_for
from .thresholds import Threshold


@dataclass
class RunContext:
    out: Path
    threads: int = 1
    seeds: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    files: list = field(default_factory=list)

    def streams(self, master: int, replica: int, label: str, names=("init", "events")) -> dict:
        out = {}
        for name in names:
            lab = f"{label}/{name}"
            s = derive_seed(master, replica, lab)
            self.seeds.setdefault(lab, {})[replica] = s
            out[name] = np.random.Generator(np.random.PCG64(s))
        return out

    def map_replicas(self, fn: Callable, master: int, R: int, label: str, names=("init", "events")) -> list:
        """``fn(replica, streams)`` for ``replica < R``; failed replicas give ``None``."""
        def one(r):
            rngs = self.streams(master, r, label, names)
            try:
                return fn(r, rngs)
            except Exception as exc:  # recorded, aggregated as a failure count
                return _Failure(r, f"{type(exc).__name__}: {exc}")

        if self.threads > 1 and R > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                results = list(pool.map(one, range(R)))
        else:
            results = [one(r) for r in range(R)]
        out = []
        for r, res in enumerate(results):
            if isinstance(res, _Failure):
                self.failures.append({"label": label, "replica": r, "error": res.message})
                out.append(None)
            else:
                out.append(res)
        return out

    def csv(self, name: str, header, rows) -> None:
        self.files.append(write_csv(self.out / name, header, rows))


@dataclass
class _Failure:
    replica: int
    message: str


def criterion(th: Threshold, observed, passed: bool, threshold=None, **detail) -> dict:
    row = {"id": th.criterion, "description": th.description, "observed": observed,
           "threshold": th.as_dict() if threshold is None else threshold, "pass": bool(passed)}
    if detail:
        row["detail"] = detail
    return row


def _ok(results) -> list:
    return [r for r in results if r is not None]


def _grid(cfg: ExperimentConfig, default_nodes: int = 129) -> meanfield.TraitGrid:
    return meanfield.TraitGrid(cfg.model.space, int(cfg.meanfield.get("nodes", default_nodes)))


def _limit_path(cfg: ExperimentConfig, times, default_nodes: int = 129) -> meanfield.DensityPath:
    grid = _grid(cfg, default_nodes)
    u0 = meanfield.initial_density(cfg.model, cfg.initial, grid)
    dt = cfg.meanfield.get("dt")
    return meanfield.integrate(u0, cfg.model, float(times[-1]), dt, times)


def _write_limit(ctx: RunContext, cfg: ExperimentConfig, mf: meanfield.DensityPath) -> None:
    proj = mf.project(cfg.tests.evaluate(mf.grid.points))
    ctx.csv("meanfield.csv", ["time", "mass", *cfg.tests.names],
            [[t, m, *p] for t, m, p in zip(mf.times, mf.mass, proj)])


def _snapshot_rows(n: int, paths) -> list:
    rows = []
    for r, p in enumerate(paths):
        if p is None:
            continue
        for t, m, v in zip(p.times, p.mass, p.values):
            rows.append([n, r, t, m, *v])
    return rows


def _mean_se(x) -> tuple[float, float]:
    x = np.asarray(x, float)
    if x.size < 2:
        return float(x.mean()) if x.size else float("nan"), float("nan")
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))


def _need_initial(cfg: ExperimentConfig) -> InitialCondition:
    if cfg.initial is None:
        raise ConfigError(f"{cfg.kind} needs an [initial] table")
    return cfg.initial


# ---------------------------------------------------------------------------
# law of large numbers


def lln_convergence(cfg: ExperimentConfig, ctx: RunContext) -> dict:
    init = _need_initial(cfg)
    th = cfg.thresholds
    ts = cfg.snapshots
    mf = _limit_path(cfg, ts)
    _write_limit(ctx, cfg, mf)
    xi = mf.mass
    report = {"limit_mass_final": float(xi[-1])}
    if cfg.model.dispersal.family == "point_mass" and init.law == "point":
        x0 = np.array(init.point)
        b = float(cfg.model.birth(x0, cfg.model.dim)[0])
        d = float(cfg.model.death(x0, cfg.model.dim)[0])
        a = float(np.ravel(cfg.model.competition(x0, x0, cfg.model.dim))[0])
        report["limit_vs_logistic"] = float(np.max(np.abs(
            xi - meanfield.logistic_closed_form(init.mass, b, d, a, ts))))
    if cfg.replicas == 0:
        report["criteria"] = []
        return report

    per_n = []
    for n in cfg.n:
        spec = cfg.spec_at(n)

        def rep(r, rngs, spec=spec):
            return simulate(spec, init, cfg.horizon, cfg.tests, ts, rngs["events"], init_rng=rngs["init"],
                            record_log=False).path

        paths = ctx.map_replicas(rep, cfg.seed, cfg.replicas, label_for("lln", n))
        ctx.csv(f"snapshots_n{n}.csv", ["n", "replica", "time", "mass", *cfg.tests.names],
                _snapshot_rows(n, paths))
        sup = [float(np.max(np.abs(p.mass - xi))) for p in _ok(paths)]
        mean, se = _mean_se(sup)
        per_n.append({"n": n, "replicas": len(sup), "mean_sup_error": mean, "se": se})
    ns = np.array([row["n"] for row in per_n], float)
    errs = np.array([row["mean_sup_error"] for row in per_n])
    if len(ns) >= 2 and np.all(errs > 0):
        slope, intercept = np.polyfit(np.log(ns), np.log(errs), 1)
    else:
        slope, intercept = float("nan"), float("nan")
    report["per_n"] = per_n
    report["fit"] = {"slope": float(slope), "intercept": float(intercept)}
    t = th["lln.slope"]
    report["criteria"] = [criterion(t, float(slope), t.check_range(float(slope)))]
    return report


# ---------------------------------------------------------------------------
# martingale identity


def _fine_times(T: float, step: float, extra) -> np.ndarray:
    k = max(2, int(math.ceil(T / step - 1e-9)))
    grid = np.linspace(0.0, T, k + 1)
    ts = np.unique(np.concatenate([grid, np.asarray(extra, float)]))
    # merge points closer than a tiny tolerance
    keep = np.concatenate([[True], np.diff(ts) > 1e-12 * max(1.0, T)])
    return ts[keep]


def martingale_check(cfg: ExperimentConfig, ctx: RunContext) -> dict:
    init = _need_initial(cfg)
    th = cfg.thresholds
    T = cfg.horizon
    step = float(cfg.meanfield.get("snapshot_step", 0.01))
    mf = _limit_path(cfg, _fine_times(T, step, cfg.snapshots))
    _write_limit(ctx, cfg, mf)
    report: dict = {"criteria": []}
    if cfg.replicas == 0:
        return report
    n = cfg.n[0]
    spec = cfg.spec_at(n)
    quad = int(cfg.options.get("quad_nodes", 48))

    def rep(r, rngs):
        sim = simulate(spec, init, T, cfg.tests, cfg.snapshots, rngs["events"], init_rng=rngs["init"],
                       record_log=True)
        res = fluctuation.martingale_path(sim, mf, spec, cfg.tests, [T], quad)
        return res.martingale[-1], res.bracket[-1], res.compensator[-1], res.reconstruction_error

    out = _ok(ctx.map_replicas(rep, cfg.seed, cfg.replicas, label_for("martingale", n)))
    M = np.array([o[0] for o in out])
    B = np.array([o[1] for o in out])
    C = np.array([o[2] for o in out])
    ctx.csv("martingale.csv", ["replica", "test", "M_T", "bracket_T", "compensator_T"],
            [[r, name, M[r, j], B[r, j], C[r, j]] for r in range(len(out))
             for j, name in enumerate(cfg.tests.names)])
    rows = []
    tm, tb = th["martingale.mean"], th["martingale.bracket"]
    for j, name in enumerate(cfg.tests.names):
        mu, se = _mean_se(M[:, j])
        rows.append(criterion(tm, mu, tm.check_se(mu, se), test=name, se=se,
                              z=mu / se if se > 0 else float("nan")))
    for j, name in enumerate(cfg.tests.names):
        mu, se = _mean_se(B[:, j] - C[:, j])
        rows.append(criterion(tb, mu, tb.check_se(mu, se), test=name, se=se,
                              z=mu / se if se > 0 else float("nan"),
                              mean_bracket=float(B[:, j].mean()), mean_compensator=float(C[:, j].mean())))
    report.update(n=n, replicas_used=len(out),
                  reconstruction_error=float(max((o[3] for o in out), default=0.0)), criteria=rows)
    return report


# ---------------------------------------------------------------------------
# covariance of the fluctuation limit


def discrepancy(emp: np.ndarray, se: np.ndarray, theo: np.ndarray) -> float:
    """Relative squared covariance error with the sampling-noise part removed.

    ``sum((emp - theo)^2 - se^2) / sum(theo^2)`` over the upper triangle; an
    unbiased estimate of the squared relative bias.
    """
    iu = np.triu_indices(theo.shape[-1])
    num = np.sum((emp[..., iu[0], iu[1]] - theo[..., iu[0], iu[1]]) ** 2 - se[..., iu[0], iu[1]] ** 2)
    den = np.sum(theo[..., iu[0], iu[1]] ** 2)
    return float(num / den)


def clt_covariance(cfg: ExperimentConfig, ctx: RunContext) -> dict:
    init = _need_initial(cfg)
    th = cfg.thresholds
    times = np.asarray(cfg.options.get("times", [t for t in cfg.snapshots if t > 0]), float)
    grid = _grid(cfg)
    lc = fluctuation.limit_covariance(cfg.model, init, grid, cfg.tests, times,
                                      float(cfg.meanfield.get("lyapunov_dt", 0.01)), init.mode,
                                      cfg.meanfield.get("dt"))
    snaps = cfg.snapshots
    ref = lc.mf.project(cfg.tests.evaluate(grid.points))[lc.mf.index_of(snaps)]
    ctx.csv("meanfield.csv", ["time", *cfg.tests.names], [[t, *v] for t, v in zip(snaps, ref)])
    names = cfg.tests.names
    K = len(names)
    report: dict = {"times": times.tolist(), "limit_covariance": {repr(float(t)): lc.at(t) for t in times}}
    if cfg.replicas == 0:
        ctx.csv("covariance.csv", ["n", "t", "i", "j", "empirical", "theoretical", "se"],
                [["limit", t, names[i], names[j], "", lc.at(t)[i, j], ""]
                 for t in times for i in range(K) for j in range(i, K)])
        report["criteria"] = []
        return report

    tidx = [int(np.argmin(np.abs(snaps - t))) for t in times]
    cov_rows, per_n, samples = [], [], {}
    for n in cfg.n:
        spec = cfg.spec_at(n)

        def rep(r, rngs, spec=spec):
            return simulate(spec, init, cfg.horizon, cfg.tests, snaps, rngs["events"], init_rng=rngs["init"],
                            record_log=False).path

        paths = ctx.map_replicas(rep, cfg.seed, cfg.replicas, label_for("clt", n))
        ctx.csv(f"snapshots_n{n}.csv", ["n", "replica", "time", "mass", *names], _snapshot_rows(n, paths))
        Y = np.stack([math.sqrt(n) * (p.values - ref) for p in _ok(paths)])
        samples[n] = Y
        emps, ses, theos = [], [], []
        for t, m in zip(times, tidx):
            est = fluctuation.empirical_covariance(Y[:, m, :])
            theo = lc.at(t)
            emps.append(est.cov), ses.append(est.se), theos.append(theo)
            for i in range(K):
                for j in range(i, K):
                    cov_rows.append([n, t, names[i], names[j], est.cov[i, j], theo[i, j], est.se[i, j]])
        emps, ses, theos = np.array(emps), np.array(ses), np.array(theos)
        z = np.abs(emps - theos) / ses
        per_n.append({"n": n, "replicas": int(Y.shape[0]), "discrepancy": discrepancy(emps, ses, theos),
                      "max_z": float(np.max(z)), "mean_fluctuation": Y[:, tidx, :].mean(axis=0)})
    ctx.csv("covariance.csv", ["n", "t", "i", "j", "empirical", "theoretical", "se"], cov_rows)

    rows = []
    nmax = max(cfg.n)
    Y = samples[nmax]
    tc = th["clt.covariance"]
    for t, m in zip(times, tidx):
        est = fluctuation.empirical_covariance(Y[:, m, :])
        z = np.abs(est.cov - lc.at(t)) / est.se
        iu = np.triu_indices(K)
        worst = int(np.argmax(z[iu]))
        rows.append(criterion(tc, float(z[iu].max()), bool(np.all(z[iu] <= tc.k_se)), n=nmax, t=float(t),
                              worst_entry=[names[iu[0][worst]], names[iu[1][worst]]],
                              entries_outside=int(np.sum(z[iu] > tc.k_se)), entries=int(len(iu[0]))))
    if len(cfg.n) >= 2:
        nmin = min(cfg.n)
        dmin = next(p["discrepancy"] for p in per_n if p["n"] == nmin)
        dmax = next(p["discrepancy"] for p in per_n if p["n"] == nmax)
        td = th["clt.discrepancy"]
        drop = dmax - dmin
        rows.append(criterion(td, drop, bool(drop < 0 and td.check_range(drop)), n_small=nmin, n_large=nmax,
                              discrepancy_small=dmin, discrepancy_large=dmax))
    ts_, tk = th["clt.skewness"], th["clt.kurtosis"]
    diag = {}
    rng = np.random.Generator(np.random.PCG64(derive_seed(cfg.seed, 0, "clt/bootstrap")))
    for t, m in zip(times, tidx):
        for j, name in enumerate(names):
            diag[f"t={float(t)!r}/{name}"] = fluctuation.gaussianity_diagnostics(
                Y[:, m, j], int(cfg.options.get("bootstrap", 999)), rng)
    skews = {k: abs(v["skewness"]) for k, v in diag.items()}
    kurts = {k: abs(v["excess_kurtosis"]) for k, v in diag.items()}
    ks_worst = max(skews, key=skews.get)
    kk_worst = max(kurts, key=kurts.get)
    rows.append(criterion(ts_, skews[ks_worst], all(ts_.check_range(v) for v in skews.values()), n=nmax,
                          worst=ks_worst))
    rows.append(criterion(tk, kurts[kk_worst], all(tk.check_range(v) for v in kurts.values()), n=nmax,
                          worst=kk_worst))
    report.update(per_n=per_n, gaussianity=diag, criteria=rows)
    return report


# ---------------------------------------------------------------------------
# one-trait OU limit


def _degenerate_params(cfg: ExperimentConfig, init: InitialCondition) -> ou1d.OUParams:
    spec = cfg.model
    if spec.dispersal.family != "point_mass" or init.law != "point":
        raise ConfigError("ou_stationary needs point-mass dispersal and a point initial law")
    x0 = np.array(init.point)
    b = float(spec.birth(x0, spec.dim)[0])
    d = float(spec.death(x0, spec.dim)[0])
    a = float(np.ravel(spec.competition(x0, x0, spec.dim))[0])
    return ou1d.OUParams(b, d, a, init.mass)


def ou_stationary(cfg: ExperimentConfig, ctx: RunContext) -> dict:
    init = _need_initial(cfg)
    th = cfg.thresholds
    p = _degenerate_params(cfg, init)
    T = cfg.horizon
    target = p.stationary_variance
    checks = np.asarray(cfg.options.get("check_times", [1.0, 2.0, 5.0, 10.0, T]), float)
    checks = np.unique(checks[checks <= T])
    V = ou1d.variance(p, checks)
    ctx.csv("ou_variance.csv", ["time", "xi", "theta", "sigma", "V"],
            [[t, *ou1d.ou_coefficients(p, t), v] for t, v in zip(checks, V)])
    VT = float(ou1d.variance(p, T))
    ta, tl, te = th["ou.analytic"], th["ou.lyapunov"], th["ou.empirical"]
    rows = [criterion(ta, abs(VT - target), ta.check_tol(VT - target), V_T=VT, target=target, T=T)]

    nodes = int(cfg.meanfield.get("nodes", 33))
    grid = meanfield.TraitGrid(cfg.model.space, nodes)
    one = fluctuation.TestFunctionSet((ScalarField.constant(1.0),), ("one",), cfg.model.dim)
    lc = fluctuation.limit_covariance(cfg.model, init, grid, one, checks,
                                      float(cfg.meanfield.get("lyapunov_dt", 0.01)), "quantized",
                                      cfg.meanfield.get("dt"))
    gap = np.abs(lc.K[:, 0, 0] - V)
    rows.append(criterion(tl, float(gap.max()), tl.check_tol(float(gap.max())),
                          times=checks.tolist(), lyapunov=lc.K[:, 0, 0].tolist()))
    report: dict = {"params": p.__dict__, "V_T": VT}
    if cfg.replicas == 0:
        report["criteria"] = rows
        return report

    n = cfg.n[0]
    spec = cfg.spec_at(n)
    snaps = cfg.snapshots
    xi = meanfield.logistic_closed_form(p.xi0, p.b, p.d, p.alpha, snaps)

    def rep(r, rngs):
        return simulate(spec, init, T, cfg.tests, snaps, rngs["events"], init_rng=rngs["init"],
                        record_log=False).path

    paths = ctx.map_replicas(rep, cfg.seed, cfg.replicas, label_for("ou", n))
    ctx.csv(f"snapshots_n{n}.csv", ["n", "replica", "time", "mass", *cfg.tests.names], _snapshot_rows(n, paths))
    eta = np.array([math.sqrt(n) * (pth.mass[-1] - xi[-1]) for pth in _ok(paths)])
    var, se = fluctuation.jackknife_variance_se(eta)
    rows.append(criterion(te, var, te.check_se(var - target, se), target=target, se=se, n=n,
                          replicas=int(eta.size), z=(var - target) / se))
    em_dt = float(cfg.options.get("em_dt", 0.001))
    em_rng = np.random.Generator(np.random.PCG64(derive_seed(cfg.seed, 0, "ou/euler")))
    _, em = ou1d.simulate_ou(p, T, em_dt, em_rng, paths=cfg.replicas)
    em_var, em_se = fluctuation.jackknife_variance_se(em[:, -1])
    report.update(eta_mean=float(eta.mean()), eta_variance=var, eta_se=se,
                  euler_variance=em_var, euler_se=em_se, criteria=rows)
    return report


# ---------------------------------------------------------------------------
# tail bound


def tail_bound_check(cfg: ExperimentConfig, ctx: RunContext) -> dict:
    init = _need_initial(cfg)
    th = cfg.thresholds
    tb, tcp = th["tail.bound"], th["tail.coupling"]
    configs = cfg.options.get("configs", [])
    coupled = int(cfg.options.get("coupled_runs", 100))
    bbar = cfg.model.b_bar
    rows, table, findings = [], [], []
    tail_rows = []
    for c, conf in enumerate(configs):
        n, s, t, beta = int(conf["n"]), float(conf["s"]), float(conf["t"]), float(conf["beta"])
        mass = float(conf.get("initial_mass", init.mass))
        ic = InitialCondition(mass, init.law, init.point, init.grid_values, init.mode)
        entry = {"config": c, "n": n, "s": s, "t": t, "beta": beta, "initial_mass": mass}
        try:
            eb = bounds.tail_bound_exp(s, t, n, beta, mass, birth_rate=bbar)
        except InapplicableBoundError as exc:
            entry.update(applicable=False, reason=str(exc))
            table.append(entry)
            continue
        gb = bounds.tail_bound_general(eb.A, s, n, beta, mass, birth_rate=bbar)
        entry.update(applicable=True, A=eb.A, floor_A=eb.floor_A, j=eb.j, exp_bound=eb.value,
                     general_bound=gb.value)
        table.append(entry)
        if cfg.replicas == 0:
            continue
        spec = cfg.spec_at(n)

        def rep(r, rngs, spec=spec, ic=ic, s=s):
            return float(simulate(spec, ic, s, None, [0.0, s], rngs["events"], init_rng=rngs["init"],
                                  record_log=False).path.mass[-1])

        masses = np.array(_ok(ctx.map_replicas(rep, cfg.seed, cfg.replicas, label_for("tail", n, f"config{c}"))))
        hits = int(np.sum(masses > eb.A))
        R = masses.size
        phat = hits / R
        se = bounds.binomial_se(phat, R)
        tail_rows.extend([c, r, m] for r, m in enumerate(masses))
        entry.update(mc_tail=phat, mc_se=se, replicas=R, mean_mass=float(masses.mean()))
        rows.append(criterion(tb, phat, bool(phat - eb.value <= tb.k_se * se),
                              {"bound": eb.value, "k_se": tb.k_se, "se": se}, config=c, n=n, s=s, t=t))

        def crep(r, rngs, spec=spec, ic=ic, s=s):
            x0 = ic.place(spec, spec.scale, rngs["init"])
            run = bounds.coupled_run(spec, x0, s, rngs["events"])
            return int(np.min(run.yule - run.bpdl))

        gaps = _ok(ctx.map_replicas(crep, cfg.seed, coupled, label_for("coupled", n, f"config{c}")))
        entry["coupling_min_gap"] = int(min(gaps)) if gaps else None
        rows.append(criterion(tcp, entry["coupling_min_gap"], bool(gaps) and tcp.check_range(min(gaps)),
                              config=c, runs=len(gaps)))

        # the displayed finite-sum bound against the pure-birth tail, started at n j
        m0 = n * eb.j
        if m0 >= 1 and cfg.options.get("witness", True):
            wr = int(cfg.options.get("witness_replicas", 2000))
            wrng = np.random.Generator(np.random.PCG64(derive_seed(cfg.seed, c, "tail/witness")))
            py, pse = bounds.pure_birth_tail(bbar, m0, s, eb.A, n, wr, wrng)
            disp = bounds.tail_bound_general(eb.A, s, n, j=eb.j, initial={m0: 1.0}, birth_rate=bbar)
            cher = bounds.tail_bound_general(eb.A, s, n, j=eb.j, initial={m0: 1.0}, birth_rate=bbar,
                                             form="chernoff")
            findings.append({"config": c, "initial_count": m0, "pure_birth_tail": py, "se": pse,
                             "displayed_bound": disp.value, "chernoff_bound": cher.value,
                             "displayed_violated": bool(py - disp.value > 3 * pse),
                             "chernoff_violated": bool(py - cher.value > 3 * pse)})
    if tail_rows:
        ctx.csv("tail_masses.csv", ["config", "replica", "mass"], tail_rows)
    return {"table": table, "findings": findings, "criteria": rows}


# ---------------------------------------------------------------------------
# mean-field solver


def _random_tests(rng: np.random.Generator, x: np.ndarray, count: int) -> np.ndarray:
    """Random cosine series ``sum_k a_k cos(k pi x)`` with ``a_k ~ N(0, 1) / (1 + k)``."""
    k = np.arange(6)
    coef = rng.standard_normal((count, k.size)) / (1 + k)
    return np.cos(np.pi * x[:, None] * k[None, :]) @ coef.T


def meanfield_validation(cfg: ExperimentConfig, ctx: RunContext) -> dict:
    init = _need_initial(cfg)
    th = cfg.thresholds
    spec = cfg.model
    grid = _grid(cfg)
    u0 = meanfield.initial_density(spec, init, grid)
    T = cfg.horizon
    opts = cfg.options
    rows = []

    # weak form on random test functions
    h = float(opts.get("residual_step", 0.005))
    steps = 2 * max(1, int(math.ceil(T / (2 * h) - 1e-9)))
    path = meanfield.integrate(u0, spec, T, min(h, float(opts.get("residual_dt", h))), np.linspace(0, T, steps + 1))
    _write_limit(ctx, cfg, path)
    rng = np.random.Generator(np.random.PCG64(derive_seed(cfg.seed, 0, "meanfield/tests")))
    count = int(opts.get("residual_tests", 8))
    if grid.dim == 1:
        Phi = _random_tests(rng, grid.points[:, 0], count)
        disperse = lambda F: meanfield.quadrature_dispersal(spec, grid, F)
    else:
        Phi = np.prod([_random_tests(rng, grid.points[:, k], count) for k in range(grid.dim)], axis=0)
        disperse = None
    res = meanfield.weak_form_residual(path, spec, Phi, disperse)
    tr = th["meanfield.residual"]
    worst = float(np.abs(res).max())
    rows.append(criterion(tr, worst, tr.check_tol(worst), tests=count, snapshot_step=T / steps,
                          independent_dispersal=disperse is not None))

    # fourth-order self-convergence
    dts = [float(v) for v in opts.get("order_dts", [0.016, 0.008, 0.004])]
    finals = [meanfield.integrate(u0, spec, T, dt, [T]).values[-1] for dt in dts]
    errs = [float(np.max(np.abs(a - b))) for a, b in zip(finals[:-1], finals[1:])]
    ratios = [e1 / e2 for e1, e2 in zip(errs[:-1], errs[1:])]
    to = th["meanfield.order"]
    rows.append(criterion(to, ratios[0] if len(ratios) == 1 else ratios,
                          bool(ratios) and all(to.check_range(r) for r in ratios), dts=dts, errors=errs))

    # degenerate case against the logistic solution
    lg = opts.get("logistic", {"b": 2.0, "d": 1.0, "alpha": 1.0, "xi0": 0.5, "T": 10.0})
    dspec = ModelSpec(spec.space, ScalarField.constant(lg["b"]), ScalarField.constant(lg["d"]),
                      SeparableKernel.constant(lg["alpha"]), DispersalKernel("point_mass"))
    center = tuple(0.5 * (a + b) for a, b in zip(spec.space.lower, spec.space.upper))
    dgrid = meanfield.TraitGrid(spec.space, 9)
    du0 = meanfield.initial_density(dspec, InitialCondition(lg["xi0"], "point", center), dgrid)
    lts = np.linspace(0.0, lg["T"], 101)
    dpath = meanfield.integrate(du0, dspec, lg["T"], lg.get("dt"), lts)
    exact = meanfield.logistic_closed_form(lg["xi0"], lg["b"], lg["d"], lg["alpha"], lts)
    gap = float(np.max(np.abs(dpath.mass - exact)))
    tlg = th["meanfield.logistic"]
    rows.append(criterion(tlg, gap, tlg.check_tol(gap), **lg))
    ctx.csv("logistic.csv", ["time", "mass", "closed_form"], [[t, m, e] for t, m, e in zip(lts, dpath.mass, exact)])
    return {"clipped_steps": len(path.clipped), "criteria": rows}


# ---------------------------------------------------------------------------
# engine


def _log_bytes(sim) -> bytes:
    log: EventLog = sim.log
    parts = [repr(sim.path.to_dict()), repr(log.to_dict()), sim.final_traits.tobytes()]
    return "".join(p if isinstance(p, str) else p.hex() for p in parts).encode()


def engine_validation(cfg: ExperimentConfig, ctx: RunContext) -> dict:
    init = _need_initial(cfg)
    th = cfg.thresholds
    opts = cfg.options
    rows = []
    n = cfg.n[0]
    spec = cfg.spec_at(n)
    backends = available_backends()

    # transition probabilities against brute-force enumeration
    rng = np.random.Generator(np.random.PCG64(derive_seed(cfg.seed, 0, "engine/oracle")))
    worst, cases = 0.0, 0
    lo, hi = np.array(spec.space.lower), np.array(spec.space.upper)
    for _ in range(int(opts.get("oracle_cases", 50))):
        size = int(rng.integers(1, int(opts.get("max_individuals", 5)) + 1))
        traits = lo + (hi - lo) * rng.random((size, spec.dim))
        ref = brute_force_transition_probabilities(spec, traits).as_array()
        for be in backends:
            got = transition_probabilities(Population(spec, traits, backend=be)).as_array()
            worst = max(worst, float(np.max(np.abs(got - ref))))
        cases += 1
    t_or = th["engine.oracle"]
    rows.append(criterion(t_or, worst, t_or.check_tol(worst), cases=cases, backends=backends))

    # coherence of cached sums after full runs
    T = cfg.horizon
    snaps = cfg.snapshots

    def rep(r, rngs):
        sim = simulate(spec, init, T, cfg.tests, snaps, rngs["events"], init_rng=rngs["init"],
                       record_log=True, debug=True)
        return sim

    sims = ctx.map_replicas(rep, cfg.seed, cfg.replicas, label_for("engine", n))
    ok = _ok(sims)
    coh = max((s.coherence for s in ok), default=0.0)
    replay_ok = all(np.array_equal(np.sort(s.log.replay(), axis=0), np.sort(s.final_traits, axis=0)) for s in ok)
    tc = th["engine.coherence"]
    rows.append(criterion(tc, coh, tc.check_tol(coh) and replay_ok, runs=len(ok), replay_matches=replay_ok))
    ctx.csv(f"snapshots_n{n}.csv", ["n", "replica", "time", "mass", *cfg.tests.names],
            _snapshot_rows(n, [s.path if s is not None else None for s in sims]))

    # byte-identical reruns, and identical output across backends
    mismatches, compared = 0, 0
    for r in range(min(len(sims), int(opts.get("repro_runs", 3)))):
        if sims[r] is None:
            continue
        first = _log_bytes(sims[r])
        for be in backends:
            rngs = ctx.streams(cfg.seed, r, label_for("engine", n))
            again = simulate(spec, init, T, cfg.tests, snaps, rngs["events"], init_rng=rngs["init"],
                             record_log=True, backend=be)
            compared += 1
            mismatches += int(_log_bytes(again) != first)
    trp = th["engine.reproducible"]
    rows.append(criterion(trp, mismatches, trp.check_tol(mismatches) and compared > 0, comparisons=compared,
                          backends=backends))
    return {"events": [s.events for s in ok], "criteria": rows}


KIND_RUNNERS = {
    "lln_convergence": lln_convergence,
    "martingale_check": martingale_check,
    "clt_covariance": clt_covariance,
    "ou_stationary": ou_stationary,
    "tail_bound_check": tail_bound_check,
    "meanfield_validation": meanfield_validation,
    "engine_validation": engine_validation,
}

__all__ = ["RunContext", "KIND_RUNNERS", "criterion", "discrepancy", *KIND_RUNNERS]
