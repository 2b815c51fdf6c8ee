import math

import numpy as np
import pytest

from nnfault.config import build_hooks, parse_config, resolve
from nnfault.errors import ConfigError, DataError
from nnfault.experiment import (
    ExperimentPlan,
    PlanKind,
    ResultTable,
    Runner,
    read_grid,
    run_ber_sweep,
    run_bit_sense,
    run_channel_sense,
    run_golden,
    run_inject,
    run_pixel_sense,
    run_propagation,
    spearman,
    timing_report,
    write_grid,
)
from nnfault.fault import Rng
from nnfault.graph import HookPoint, Site, forward
from nnfault.modelio import Dataset
from nnfault.observe import ObserverKind, ObserverSpec, dual_forward
from nnfault.tensor import Tensor

WEIGHT_FLIP = "[injection]\nlayers = model.conv*, model.fc*\ntarget = weight\nerror_model = bitflip_random\n{extra}[quantize]\nmethod = {method}\n"


def cfg(text, graph):
    return resolve(parse_config(text), graph)


def test_golden(lenet):
    graph, ds = lenet
    assert run_golden(graph, ds).accuracy == 1.0
    wrong = Dataset(ds.inputs[:10], (ds.labels[:10] + 1) % 10)
    assert run_golden(graph, wrong).accuracy == 0.0
    with pytest.raises(DataError):
        run_golden(graph, Dataset(np.zeros((2, 1, 20, 20), np.float32), np.zeros(2, int)))
    with pytest.raises(DataError):
        run_golden(graph, Dataset(ds.inputs[:0], ds.labels[:0]))


def test_plan_validation():
    with pytest.raises(ConfigError):
        ExperimentPlan(PlanKind.BerSweep, trials=0)
    with pytest.raises(ConfigError):
        ExperimentPlan(PlanKind.BerSweep, bers=(1e-3, 1e-4))
    with pytest.raises(ConfigError):
        ExperimentPlan(PlanKind.BerSweep, bers=(1e-3, 1e-3))


def test_sweep_ber_zero_is_golden_and_deterministic(lenet):
    graph, ds = lenet
    template = cfg(WEIGHT_FLIP.format(extra="ber = 0\n", method="fixed:3.13"), graph)
    plan = ExperimentPlan(PlanKind.BerSweep, trials=4, seed=3, bers=(0.0, 1e-4), limit=64)
    a = run_ber_sweep(plan, template, graph, ds)
    assert a.get("0", "accuracy").value == 1.0 and a.get("0", "rmse").value == 0.0
    assert a.get("0.0001", "error_rate").value == pytest.approx(1 - a.get("0.0001", "accuracy").value)
    b = run_ber_sweep(ExperimentPlan(PlanKind.BerSweep, trials=4, seed=3, bers=(0.0, 1e-4), limit=64, jobs=4), template, graph, ds)
    assert a.to_csv() == b.to_csv()
    assert all(r.stderr is not None for r in a.rows)


def test_stderr_absent_for_single_trial(lenet):
    graph, ds = lenet
    t = run_inject(ExperimentPlan(PlanKind.SingleInject, trials=1, seed=0, limit=8), cfg("ber = 0.001\nerror_model = stuck0\n", graph), graph, ds)
    assert all(r.stderr is None and r.trials == 1 for r in t.rows)
    assert t.to_csv().splitlines()[1].endswith(",1,")


def test_result_table_csv_and_rank():
    t = ResultTable()
    t.add("a", "rmse", [3.0, 5.0])
    t.add("b", "rmse", [1.0, 1.0])
    assert t.to_csv() == "key,metric,value,trials,stderr\na,rmse,4.0,2,1.0\nb,rmse,1.0,2,0.0\n"
    assert [r.key for r in t.ranked("rmse").rows] == ["b", "a"]
    with pytest.raises(KeyError):
        t.get("c", "rmse")


def test_bit_sense_rate_zero_and_range(lenet):
    graph, ds = lenet
    template = cfg(WEIGHT_FLIP.format(extra="ber = 0\n", method="fixed:3.13"), graph)
    t = run_bit_sense(ExperimentPlan(PlanKind.BitSense, seed=1, limit=16), template, graph, ds)
    assert len(t.column("accuracy")) == 16
    assert all(r.value == 1.0 for r in t.column("accuracy"))
    with pytest.raises(ConfigError):
        run_bit_sense(ExperimentPlan(PlanKind.BitSense, seed=1, bits=(16,), limit=4), template, graph, ds)


@pytest.mark.parametrize("method,hi,lo", [("fixed:3.13", 15, 0), ("float16", 14, 0)])
def test_bit_sense_high_bits_hurt_more_single_image(lenet, method, hi, lo):
    graph, ds = lenet
    template = cfg(WEIGHT_FLIP.format(extra="ber = 1e-3\n", method=method), graph)
    t = run_bit_sense(ExperimentPlan(PlanKind.BitSense, trials=5, seed=2, bits=(lo, hi), limit=1), template, graph, ds)
    assert t.get(str(hi), "rmse").value >= t.get(str(lo), "rmse").value


def test_channel_sense_requires_conv(lenet):
    graph, ds = lenet
    with pytest.raises(ConfigError):
        run_channel_sense(ExperimentPlan(PlanKind.ChannelSense, seed=0, layer="model.fc1", limit=4), cfg("[injection]\nlayers = model.fc1\nber = 0.01\nerror_model = stuck0\n", graph), graph, ds)
    with pytest.raises(ConfigError):
        run_channel_sense(ExperimentPlan(PlanKind.ChannelSense, seed=0, layer="model.conv2", limit=4), cfg("[injection]\nlayers = model.conv1\nber = 0.01\nerror_model = stuck0\n", graph), graph, ds)


def test_channel_mask_leaves_other_channels_untouched(lenet):
    graph, ds = lenet
    resolved = cfg("[injection]\nlayers = model.conv1\nber = 0.01\nerror_model = bitflip_random\n[quantize]\nmethod = fixed:3.13\n", graph)
    from nnfault.fault import SiteMask

    masked = resolved.with_mask(SiteMask(channels=frozenset({2})))
    hooks = build_hooks(masked, Rng(0))
    x = ds.inputs[:4]
    seen = {}

    def grab(t):
        seen["x"] = t.data.copy()
        return t

    probe = (HookPoint("model.conv1", Site.ActivationPost), grab)
    forward(graph, x, [probe])
    golden_act = seen["x"]
    forward(graph, x, hooks + [probe])
    diff = seen["x"] != golden_act
    assert diff[:, 2].any()
    assert not np.delete(diff, 2, axis=1).any()


def test_channel_sense_matches_independent_runs(lenet):
    graph, ds = lenet
    template = cfg("[injection]\nlayers = model.conv1\nber = 0.002\nerror_model = bitflip_random\n[quantize]\nmethod = fixed:3.13\n", graph)
    plan = ExperimentPlan(PlanKind.ChannelSense, trials=100, seed=11, limit=4, jobs=4)
    table = run_channel_sense(plan, template, graph, ds)
    from nnfault.fault import SiteMask

    runner = Runner(graph, ds, 4)
    for c in range(6):
        row = table.get(f"model.conv1:{c}", "rmse")
        solo = ExperimentPlan(PlanKind.SingleInject, trials=100, seed=1000 + c)
        vals = [t.rmse for t in runner.trials(template.with_mask(SiteMask(channels=frozenset({c}))), solo)]
        se = np.std(vals, ddof=1) / 10
        assert abs(np.mean(vals) - row.value) <= 4 * math.hypot(se, row.stderr)
    ranked = table.ranked("rmse").rows
    assert [r.value for r in ranked] == sorted(r.value for r in ranked)


def test_zero_weight_channel_contributes_nothing(lenet):
    graph, ds = lenet
    g = graph.copy()
    w = g.layer("model.conv2").weight.data.copy()
    w[:, 3] = 0
    g.layer("model.conv2").weight = Tensor(w)
    template = cfg("[injection]\nlayers = model.conv2\nsite = pre\nber = 0.05\nerror_model = gauss:1.0\n", g)
    t = run_channel_sense(ExperimentPlan(PlanKind.ChannelSense, trials=3, seed=0, limit=4), template, g, ds)
    assert t.get("model.conv2:3", "rmse").value == 0.0
    assert t.get("model.conv2:2", "rmse").value > 0.0


def test_pixel_sense_grid(lenet, tmp_path):
    graph, ds = lenet
    template = cfg("[injection]\nlayers = model.pool2\nber = 0\nerror_model = bitflip_random\n[quantize]\nmethod = fixed:3.13\n", graph)
    t = run_pixel_sense(ExperimentPlan(PlanKind.PixelSense, seed=0, limit=4), template, graph, ds)
    assert t.grid.shape == (4, 4) and not t.grid.any()
    write_grid(t.grid, tmp_path / "g.csv")
    np.testing.assert_array_equal(read_grid(tmp_path / "g.csv"), t.grid)
    with pytest.raises(ConfigError):
        run_pixel_sense(ExperimentPlan(PlanKind.PixelSense, seed=0, limit=4), cfg("[injection]\nlayers = model.fc1\nber = 0\nerror_model = stuck0\n", graph), graph, ds)


def test_pixel_sense_rerun_within_three_sigma(lenet):
    graph, ds = lenet
    template = cfg("[injection]\nlayers = model.pool2\nber = 0.01\nerror_model = bitflip_random\n[quantize]\nmethod = fixed:3.13\n", graph)
    a = run_pixel_sense(ExperimentPlan(PlanKind.PixelSense, trials=100, seed=21, limit=4, jobs=4), template, graph, ds)
    b = run_pixel_sense(ExperimentPlan(PlanKind.PixelSense, trials=100, seed=22, limit=4, jobs=4), template, graph, ds)
    for ra, rb in zip(a.rows, b.rows):
        assert abs(ra.value - rb.value) <= 3 * math.hypot(ra.stderr, rb.stderr) + 1e-12


def test_propagation_no_injection_all_zero(lenet):
    graph, ds = lenet
    t = run_propagation(ExperimentPlan(PlanKind.Propagation, trials=2, seed=0, limit=8), cfg("", graph), graph, ds)
    assert {r.key for r in t.rows} == set(graph.paths)
    assert all(r.value == 0.0 for r in t.rows)


def test_propagation_matches_observer_finalization(lenet):
    graph, ds = lenet
    text = "[injection]\nlayers = model.conv1\nmode = fixed_count\ncount = 1\nerror_model = bitflip_random\n[quantize]\nmethod = fixed:3.13\n"
    resolved = cfg(text, graph)
    t = run_propagation(ExperimentPlan(PlanKind.Propagation, seed=4, limit=8), resolved, graph, ds)
    obs = {p: [ObserverSpec(k) for k in (ObserverKind.AffectedCount, ObserverKind.MAE, ObserverKind.RMSE)] for p in graph.paths}
    _, _, records = dual_forward(graph, ds.inputs[:8], build_hooks(resolved, Rng(4, 0)), obs)
    for path in graph.paths:
        assert t.get(path, "mae").value == records[path][ObserverKind.MAE].finalize()["mae"]
        assert t.get(path, "rmse").value == records[path][ObserverKind.RMSE].finalize()["rmse"]
        assert t.get(path, "affected_mean").value == records[path][ObserverKind.AffectedCount].affected / 8


def test_inject_observer_rows(lenet):
    graph, ds = lenet
    text = "[injection]\nlayers = model.fc1\nber = 0.01\nerror_model = stuck0\n[observe]\nobservers = minmax\n"
    t = run_inject(ExperimentPlan(PlanKind.SingleInject, trials=2, seed=0, limit=4), cfg(text, graph), graph, ds)
    assert t.get("model.fc2", "min").value <= t.get("model.fc2", "max").value
    assert t.get("output", "accuracy").trials == 2


def test_stderr_shrinks_with_trials(lenet):
    graph, ds = lenet
    template = cfg("[injection]\nlayers = model.fc1\nber = 0.02\nerror_model = gauss:0.5\n", graph)
    se = [
        run_inject(ExperimentPlan(PlanKind.SingleInject, trials=n, seed=5, limit=4), template, graph, ds).get("output", "rmse").stderr
        for n in (300, 600)
    ]
    assert se[1] / se[0] == pytest.approx(1 / math.sqrt(2), rel=0.2)


def test_timing_report(lenet):
    graph, ds = lenet
    t = timing_report(ExperimentPlan(PlanKind.SingleInject, seed=0, limit=64), cfg("", graph), graph, ds)
    assert t.golden_mean > 0 and t.ratio < 1.5
    assert t.to_csv().startswith("phase,seconds_mean,seconds_std\ngolden,")


def test_spearman_against_scipy():
    from scipy.stats import spearmanr

    rng = np.random.default_rng(0)
    for _ in range(20):
        x, y = rng.normal(size=9), rng.integers(0, 4, size=9).astype(float)
        assert spearman(x, y) == pytest.approx(spearmanr(x, y).statistic, abs=1e-12)
