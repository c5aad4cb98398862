import json

import numpy as np
import pytest

from bpdl.errors import BudgetError, ConfigError, ReplayError
from bpdl.ibm_sim import (EventLog, InitialCondition, MeasurePath, simulate, snapshot_times,
                          stratified_unit_points)
from bpdl.fluctuation import TestFunctionSet

from conftest import bump_model, logistic_model, planar_model


def test_count_rounds_half_up():
    assert InitialCondition(0.5).count(1001) == 501
    assert InitialCondition(0.5).count(100) == 50
    assert InitialCondition(0.3).count(5) == 2


def test_quantized_placement_is_deterministic():
    spec = bump_model(n=400)
    init = InitialCondition(0.5)
    a = init.place(spec, 400, np.random.default_rng(1))
    b = init.place(spec, 400, np.random.default_rng(2))
    assert np.array_equal(a, b)
    assert len(a) == 200
    # midpoint quantiles of the uniform law
    assert np.allclose(np.sort(a[:, 0]), (np.arange(200) + 0.5) / 200)


def test_grid_law_quantiles_match_density():
    spec = bump_model(n=2000)
    init = InitialCondition(1.0, "grid", grid_values=[0.0, 2.0, 0.0])
    x = np.sort(init.place(spec, 2000)[:, 0])
    # triangle density on [0, 1]: CDF 2x^2 below 1/2
    q = (np.arange(len(x)) + 0.5) / len(x)
    left = q < 0.5
    assert np.allclose(x[left], np.sqrt(q[left] / 2), atol=1e-12)


def test_iid_placement_uses_stream():
    spec = planar_model(n=100)
    init = InitialCondition(1.0, mode="iid")
    a = init.place(spec, 100, np.random.default_rng(1))
    b = init.place(spec, 100, np.random.default_rng(1))
    assert np.array_equal(a, b)
    assert spec.space.contains(a).all()


def test_stratified_points_low_discrepancy():
    pts = stratified_unit_points(1024, 2)
    counts, _, _ = np.histogram2d(pts[:, 0], pts[:, 1], bins=8, range=[[0, 1], [0, 1]])
    assert counts.min() >= 12 and counts.max() <= 20


def test_initial_condition_validation():
    with pytest.raises(ConfigError):
        InitialCondition(0.0)
    with pytest.raises(ConfigError):
        InitialCondition(1.0, "point")
    with pytest.raises(ConfigError):
        InitialCondition(1.0, mode="sobol")


def test_snapshot_times_validation():
    assert np.allclose(snapshot_times(1.0), np.linspace(0, 1, 11))
    with pytest.raises(ConfigError):
        snapshot_times(1.0, [0.5, 0.2])
    with pytest.raises(ConfigError):
        snapshot_times(1.0, [0.0, 2.0])


def test_simulate_needs_explicit_stream():
    with pytest.raises(ConfigError):
        simulate(logistic_model(n=10), InitialCondition(0.5, "point", (0.5,)), 1.0)


def test_same_seed_same_bytes(tmp_path):
    spec = bump_model(n=200)
    tests = TestFunctionSet.default()
    files = []
    for k in range(2):
        res = simulate(spec, InitialCondition(0.5), 2.0, tests, None, np.random.default_rng(77))
        res.path.to_csv(tmp_path / f"p{k}.csv")
        res.log.to_csv(tmp_path / f"l{k}.csv")
        files.append(((tmp_path / f"p{k}.csv").read_bytes(), (tmp_path / f"l{k}.csv").read_bytes()))
    assert files[0] == files[1]


def test_measure_path_round_trip(tmp_path):
    spec = bump_model(n=100)
    res = simulate(spec, InitialCondition(0.5), 1.0, TestFunctionSet.default(), None, np.random.default_rng(3))
    res.path.to_csv(tmp_path / "p.csv")
    back = MeasurePath.from_csv(tmp_path / "p.csv", 100)
    assert np.array_equal(back.values, res.path.values) and np.array_equal(back.times, res.path.times)
    again = MeasurePath.from_dict(json.loads(json.dumps(res.path.to_dict())))
    assert np.array_equal(again.mass, res.path.mass)


def test_event_log_replay_and_round_trip():
    spec = planar_model(n=80)
    res = simulate(spec, InitialCondition(0.5, mode="iid"), 1.0, None, None, np.random.default_rng(4))
    log = res.log
    assert log.check_times()
    assert np.array_equal(log.replay(), res.final_traits)
    back = EventLog.from_dict(json.loads(json.dumps(log.to_dict())))
    assert np.array_equal(back.replay(), res.final_traits)
    assert np.array_equal(log.sizes()[-1:], [len(res.final_traits)])


def test_replay_detects_tampering():
    spec = bump_model(n=50)
    res = simulate(spec, InitialCondition(0.5), 0.5, None, None, np.random.default_rng(5))
    log = res.log
    log.trait_a[0] = log.trait_a[0] + 0.01
    with pytest.raises(ReplayError):
        log.replay()


def test_snapshot_counts_match_log():
    spec = bump_model(n=100)
    ts = np.linspace(0, 2, 9)
    res = simulate(spec, InitialCondition(0.5), 2.0, None, ts, np.random.default_rng(6))
    sizes = np.concatenate([[len(res.log.initial)], res.log.sizes()])
    idx = np.searchsorted(res.log.time, ts, side="right")
    assert np.array_equal(res.counts, sizes[idx])
    assert np.allclose(res.path.mass, res.counts / 100)


def test_budget_error_keeps_partial():
    spec = logistic_model(n=2000)
    init = InitialCondition(0.5, "point", (0.5,))
    with pytest.raises(BudgetError) as exc:
        simulate(spec, init, 10.0, None, np.linspace(0, 10, 11), np.random.default_rng(1), event_budget=3000)
    part = exc.value.partial
    assert part.events == 3000 or len(part.path.times) < 11
    assert len(part.path.times) >= 1


def test_extinction_is_absorbing():
    spec = logistic_model(b=1.0, d=0.9, alpha=5.0, n=1)
    res = simulate(spec, InitialCondition(3.0, "point", (0.5,)), 200.0, None, [0.0, 200.0],
                   np.random.default_rng(2))
    assert res.extinct
    assert res.path.mass[-1] == 0.0


def test_mass_near_limit_large_n():
    spec = logistic_model(n=20000)
    res = simulate(spec, InitialCondition(0.5, "point", (0.5,)), 5.0, None, [0.0, 5.0], np.random.default_rng(9),
                   record_log=False)
    xi = 1.0 / (1.0 + np.exp(-5.0))  # logistic from 1/2 towards 1 at rate 1
    assert abs(res.path.mass[-1] - xi) < 0.03
