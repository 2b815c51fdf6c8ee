"""Prebuilt reliability experiments producing :class:`ResultTable` CSVs.

Every trial draws its faults from its own counter-based stream
``Rng(seed, trial_id)``, so tables are identical however many worker
threads run the trials. Weight faults are permanent for a trial: the
corrupted weights are written into a private graph copy once and the whole
dataset is evaluated with them.
"""

from __future__ import annotations

import csv
import enum
import io
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .config import ConfigNode, ResolvedConfig, resolve, build_hooks
from .errors import ConfigError, DataError
from .fault import ErrorKind, ErrorModelSpec, Rng, SiteMask, Target
from .graph import Graph, LayerKind, Site, permanent_weights
from .modelio import EVAL_BATCH, Dataset, predict
from .observe import ObserverKind, ObserverSpec, Records, dual_forward, golden_pass, merge_records
from .quant import DynamicRange, QuantMethod, calibrate


class PlanKind(enum.Enum):
    GoldenRun = "golden"
    SingleInject = "inject"
    BerSweep = "sweep"
    BitSense = "bitsense"
    ChannelSense = "channelsense"
    PixelSense = "pixelsense"
    Propagation = "propagate"


class Metric(enum.Enum):
    Accuracy = "accuracy"
    RMSE = "rmse"
    MAE = "mae"
    AffectedCount = "affected"


@dataclass
class ExperimentPlan:
    kind: PlanKind
    trials: int = 1
    seed: int = 0
    bers: tuple[float, ...] = ()
    bits: tuple[int, ...] | None = None
    layer: str | None = None
    metric: Metric = Metric.Accuracy
    limit: int | None = None
    jobs: int = 1

    def __post_init__(self):
        if self.trials < 1:
            raise ConfigError("trials must be at least 1")
        self.bers = tuple(float(b) for b in self.bers)
        if any(nxt <= prev for prev, nxt in zip(self.bers, self.bers[1:])):
            raise ConfigError("ber list must be strictly increasing")


@dataclass(frozen=True)
class Row:
    key: str
    metric: str
    value: float
    trials: int
    stderr: float | None = None


@dataclass
class ResultTable:
    rows: list[Row] = field(default_factory=list)
    grid: np.ndarray | None = None

    def add(self, key: str, metric: str, values: Sequence[float], value: float | None = None) -> None:
        """Append the mean of per-trial ``values`` (or an explicit ``value``) with its standard error."""
        vals = np.asarray(values, dtype=np.float64)
        n = len(vals)
        mean = float(vals.mean()) if value is None else float(value)
        se = float(vals.std(ddof=1) / math.sqrt(n)) if n > 1 else None
        self.rows.append(Row(key, metric, mean, n, se))

    def get(self, key: str, metric: str) -> Row:
        for r in self.rows:
            if r.key == key and r.metric == metric:
                return r
        raise KeyError((key, metric))

    def column(self, metric: str) -> list[Row]:
        return [r for r in self.rows if r.metric == metric]

    def ranked(self, metric: str = "rmse") -> "ResultTable":
        """Rows of one metric sorted ascending by value (ties by key)."""
        return ResultTable(sorted(self.column(metric), key=lambda r: (r.value, r.key)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        out = csv.writer(buf, lineterminator="\n")
        out.writerow(["key", "metric", "value", "trials", "stderr"])
        for r in self.rows:
            out.writerow([r.key, r.metric, repr(r.value), r.trials, "" if r.stderr is None else repr(r.stderr)])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())


def write_grid(grid: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        for row in grid:
            out.writerow([repr(float(v)) for v in row])


def read_grid(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)])


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Top-1 accuracy; rows containing NaN never count as correct."""
    ok = (np.argmax(logits, axis=1) == labels) & ~np.isnan(logits).any(axis=1)
    return float(ok.mean())


def _pmap(fn: Callable, items: Iterable, jobs: int) -> list:
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


@dataclass
class GoldenResult:
    accuracy: float
    logits: np.ndarray
    ranges: dict[str, DynamicRange]


def _check_dataset(graph: Graph, ds: Dataset) -> None:
    if len(ds) == 0:
        raise DataError("dataset is empty")
    if ds.inputs.shape[1:] != graph.input_shape:
        raise DataError(f"dataset samples {ds.inputs.shape[1:]} do not match graph input {graph.input_shape}")


def run_golden(graph: Graph, dataset: Dataset) -> GoldenResult:
    _check_dataset(graph, dataset)
    logits = predict(graph, dataset.inputs)
    return GoldenResult(accuracy(logits, dataset.labels), logits, calibrate(graph, dataset.inputs))


@dataclass
class _Trial:
    accuracy: float
    rmse: float
    mae: float
    records: Records | None = None


class Runner:
    """Golden reference and trial execution for one (graph, dataset) pair."""

    def __init__(self, graph: Graph, dataset: Dataset, limit: int | None = None):
        dataset = dataset.subset(limit)
        _check_dataset(graph, dataset)
        self.graph, self.dataset = graph, dataset
        self.golden = predict(graph, dataset.inputs)
        self._ranges: dict[str, DynamicRange] | None = None
        self._golden_acts: dict[tuple[str, ...], list] = {}

    @property
    def golden_accuracy(self) -> float:
        return accuracy(self.golden, self.dataset.labels)

    def ranges_for(self, resolved: ResolvedConfig) -> dict[str, DynamicRange]:
        if any(c.quant.method is QuantMethod.LAYERWISE for c in resolved.enabled):
            if self._ranges is None:
                self._ranges = calibrate(self.graph, self.dataset.inputs)
            return self._ranges
        return {}

    def _chunks(self):
        x = self.dataset.inputs
        return [x[i : i + EVAL_BATCH] for i in range(0, len(x), EVAL_BATCH)]

    def _golden_chunks(self, paths: tuple[str, ...]):
        if paths not in self._golden_acts:
            self._golden_acts[paths] = [golden_pass(self.graph, x, paths) for x in self._chunks()]
        return self._golden_acts[paths]

    def trial(self, resolved: ResolvedConfig, rng: Rng, observers: dict[str, list[ObserverSpec]] | None = None) -> _Trial:
        hooks = build_hooks(resolved, rng, self.ranges_for(resolved))
        weighted = any(p.site is Site.WeightPre for p, _ in hooks)
        graph = self.graph.copy() if weighted else self.graph
        records = None
        with permanent_weights(graph, hooks) as rest:
            if observers:
                golden = self._golden_chunks(tuple(observers))
                outs = []
                for x, gold in zip(self._chunks(), golden):
                    _, out, records = dual_forward(graph, x, rest, observers, records, golden=gold)
                    outs.append(out.data)
                logits = np.concatenate(outs)
            else:
                logits = predict(graph, self.dataset.inputs, rest)
        with np.errstate(invalid="ignore", over="ignore"):
            diff = logits.astype(np.float64) - self.golden
            rmse = float(np.sqrt(np.mean(diff * diff)))
            mae = float(np.mean(np.abs(diff)))
        return _Trial(accuracy(logits, self.dataset.labels), rmse, mae, records)

    def trials(self, resolved: ResolvedConfig, plan: ExperimentPlan, point: int = 0, observers=None) -> list[_Trial]:
        base = Rng(plan.seed)
        if observers:
            self._golden_chunks(tuple(observers))
        ids = [point * plan.trials + t for t in range(plan.trials)]
        return _pmap(lambda i: self.trial(resolved, base.for_trial(i), observers), ids, plan.jobs)


def prepare_template(kind: PlanKind, tree: ConfigNode, graph: Graph) -> ResolvedConfig:
    """Resolve a config for ``kind``; sweep templates may leave ``ber`` unset."""
    if kind is PlanKind.BerSweep and "ber" not in tree.fields:
        tree = ConfigNode(tree.segment, {**tree.fields, "ber": 0.0}, tree.children)
    return resolve(tree, graph)


def _resolved(template, graph: Graph, kind: PlanKind = PlanKind.SingleInject) -> ResolvedConfig:
    if isinstance(template, ResolvedConfig):
        return template
    if isinstance(template, ConfigNode):
        return prepare_template(kind, template, graph)
    raise TypeError(f"expected ConfigNode or ResolvedConfig, got {type(template).__name__}")


def _add_output_rows(table: ResultTable, key: str, trials: list[_Trial]) -> None:
    acc = [t.accuracy for t in trials]
    table.add(key, "accuracy", acc)
    table.add(key, "error_rate", [1.0 - a for a in acc])
    table.add(key, "rmse", [t.rmse for t in trials])
    table.add(key, "mae", [t.mae for t in trials])


def _add_record_rows(table: ResultTable, trials: list[_Trial]) -> None:
    merged: Records = {}
    for t in trials:
        merged = merge_records(merged, t.records or {})
    for path, by_kind in merged.items():
        for kind, rec in by_kind.items():
            totals = rec.finalize()
            for metric, value in totals.items():
                per = [t.records[path][kind].finalize()[metric] for t in trials]
                table.add(path, metric, per, value=value)


def _runner(graph, dataset, plan, runner):
    return runner if runner is not None else Runner(graph, dataset, plan.limit)


def run_inject(plan: ExperimentPlan, template, graph: Graph, dataset: Dataset, runner: Runner | None = None) -> ResultTable:
    """Repeated injection with the template as-is; adds per-layer rows for configured observers."""
    runner = _runner(graph, dataset, plan, runner)
    resolved = _resolved(template, graph)
    observers = resolved.observers() or None
    trials = runner.trials(resolved, plan, 0, observers)
    table = ResultTable()
    _add_output_rows(table, "output", trials)
    if observers:
        _add_record_rows(table, trials)
    return table


def run_ber_sweep(plan: ExperimentPlan, template, graph: Graph, dataset: Dataset, runner: Runner | None = None) -> ResultTable:
    if not plan.bers:
        raise ConfigError("BER sweep needs at least one rate")
    runner = _runner(graph, dataset, plan, runner)
    resolved = _resolved(template, graph, PlanKind.BerSweep)
    table = ResultTable()
    for i, ber in enumerate(plan.bers):
        cfg = resolved.with_fields(ber=ber, mode="ber")
        _add_output_rows(table, f"{ber:g}", runner.trials(cfg, plan, i))
    return table


def _word_bits(resolved: ResolvedConfig) -> int:
    widths = {c.quant.bits for c in resolved.enabled}
    if len(widths) != 1:
        raise ConfigError(f"bit sensitivity needs one word width across enabled layers, got {sorted(widths)}")
    return widths.pop()


def run_bit_sense(plan: ExperimentPlan, template, graph: Graph, dataset: Dataset, runner: Runner | None = None) -> ResultTable:
    """Per bit position: flip only that bit at the template's rate."""
    runner = _runner(graph, dataset, plan, runner)
    resolved = _resolved(template, graph)
    if not resolved.enabled:
        raise ConfigError("bit sensitivity needs at least one enabled layer")
    width = _word_bits(resolved)
    bits = tuple(range(width)) if plan.bits is None else tuple(plan.bits)
    bad = [b for b in bits if not 0 <= b < width]
    if bad:
        raise ConfigError(f"bits {bad} outside the {width}-bit word")
    table = ResultTable()
    for i, b in enumerate(bits):
        cfg = resolved.with_fields(error_model=ErrorModelSpec(ErrorKind.BitFlipFixed, bit=b))
        trials = runner.trials(cfg, plan, i)
        table.add(str(b), "accuracy", [t.accuracy for t in trials])
        table.add(str(b), "rmse", [t.rmse for t in trials])
    return table


def _restrict(resolved: ResolvedConfig, layer: str | None) -> ResolvedConfig:
    if layer is None:
        enabled = resolved.enabled
        if len(enabled) != 1:
            raise ConfigError("sensitivity runs need exactly one enabled layer or an explicit layer")
        layer = enabled[0].path
    resolved.graph.layer(layer)
    if not resolved[layer].enabled:
        raise ConfigError(f"layer {layer} is not enabled for injection in the config")
    fields = {p: (f if p == layer else {**f, "enabled": False}) for p, f in resolved.fields.items()}
    return ResolvedConfig(resolved.graph, fields)


def run_channel_sense(plan: ExperimentPlan, template, graph: Graph, dataset: Dataset, runner: Runner | None = None) -> ResultTable:
    """Output RMSE with injection confined to one channel at a time, rows by channel index."""
    runner = _runner(graph, dataset, plan, runner)
    resolved = _restrict(_resolved(template, graph), plan.layer)
    layer = resolved.enabled[0].path
    if graph.layer(layer).kind is not LayerKind.Conv2d:
        raise ConfigError(f"channel sensitivity needs a Conv2d layer, {layer} is {graph.layer(layer).kind.value}")
    cfg0 = resolved[layer]
    pre = Target.Activation in cfg0.targets and cfg0.site is Site.ActivationPre
    channels = (_input_shape(graph, layer) if pre else graph.out_shapes[layer])[0]
    table = ResultTable()
    for c in range(channels):
        cfg = resolved.with_mask(SiteMask(channels=frozenset({c})))
        trials = runner.trials(cfg, plan, c)
        table.add(f"{layer}:{c}", "rmse", [t.rmse for t in trials])
        table.add(f"{layer}:{c}", "accuracy", [t.accuracy for t in trials])
    return table


def run_pixel_sense(plan: ExperimentPlan, template, graph: Graph, dataset: Dataset, runner: Runner | None = None) -> ResultTable:
    """Output RMSE with injection confined to one spatial position (all channels)."""
    runner = _runner(graph, dataset, plan, runner)
    resolved = _restrict(_resolved(template, graph), plan.layer)
    cfg0 = resolved.enabled[0]
    shape = graph.out_shapes[cfg0.path] if cfg0.site is Site.ActivationPost else _input_shape(graph, cfg0.path)
    if len(shape) != 3:
        raise ConfigError(f"pixel sensitivity needs a spatial layer, {cfg0.path} has shape {shape}")
    if Target.Weight in cfg0.targets:
        raise ConfigError("pixel sensitivity applies to activations only")
    h, w = shape[1:]
    grid = np.zeros((h, w))
    table = ResultTable()
    for i in range(h):
        for j in range(w):
            cfg = resolved.with_mask(SiteMask(pixels=frozenset({(i, j)})))
            trials = runner.trials(cfg, plan, i * w + j)
            table.add(f"{i},{j}", "rmse", [t.rmse for t in trials])
            grid[i, j] = table.rows[-1].value
    table.grid = grid
    return table


def _input_shape(graph: Graph, path: str) -> tuple[int, ...]:
    i = graph.paths.index(path)
    return graph.input_shape if i == 0 else graph.out_shapes[graph.paths[i - 1]]


PROPAGATION_OBSERVERS = (ObserverKind.AffectedCount, ObserverKind.MAE, ObserverKind.RMSE)


def run_propagation(plan: ExperimentPlan, template, graph: Graph, dataset: Dataset, runner: Runner | None = None) -> ResultTable:
    """Affected count, MAE and RMSE at every layer output, accumulated over the dataset."""
    runner = _runner(graph, dataset, plan, runner)
    resolved = _resolved(template, graph)
    observers = {p: [ObserverSpec(k) for k in PROPAGATION_OBSERVERS] for p in graph.paths}
    trials = runner.trials(resolved, plan, 0, observers)
    table = ResultTable()
    _add_record_rows(table, trials)
    return table


@dataclass
class Timing:
    golden_mean: float
    golden_std: float
    injected_mean: float
    injected_std: float

    @property
    def ratio(self) -> float:
        return self.injected_mean / self.golden_mean

    def to_csv(self) -> str:
        return (
            "phase,seconds_mean,seconds_std\n"
            f"golden,{self.golden_mean!r},{self.golden_std!r}\n"
            f"injected,{self.injected_mean!r},{self.injected_std!r}\n"
        )


def timing_report(plan: ExperimentPlan, template, graph: Graph, dataset: Dataset, repeats: int = 3) -> Timing:
    """Wall-clock golden vs injected evaluation of the dataset, interleaved per repetition."""
    repeats = max(3, repeats)
    ds = dataset.subset(plan.limit)
    _check_dataset(graph, ds)
    resolved = _resolved(template, graph)
    ranges = calibrate(graph, ds.inputs) if any(c.quant.method is QuantMethod.LAYERWISE for c in resolved.enabled) else {}
    predict(graph, ds.inputs)
    golden, injected = [], []
    for r in range(repeats):
        t0 = time.perf_counter()
        predict(graph, ds.inputs)
        golden.append(time.perf_counter() - t0)
        t0 = time.perf_counter()
        hooks = build_hooks(resolved, Rng(plan.seed, r), ranges)
        g = graph.copy() if any(p.site is Site.WeightPre for p, _ in hooks) else graph
        with permanent_weights(g, hooks) as rest:
            predict(g, ds.inputs, rest)
        injected.append(time.perf_counter() - t0)
    return Timing(float(np.mean(golden)), float(np.std(golden)), float(np.mean(injected)), float(np.std(injected)))


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Spearman rank correlation with average ranks for ties."""
    def ranks(v):
        v = np.asarray(v, dtype=np.float64)
        order = np.argsort(v, kind="stable")
        r = np.empty(len(v))
        r[order] = np.arange(1, len(v) + 1)
        for u in np.unique(v):
            tie = v == u
            r[tie] = r[tie].mean()
        return r

    rx, ry = ranks(x), ranks(y)
    rx, ry = rx - rx.mean(), ry - ry.mean()
    denom = math.sqrt(float((rx * rx).sum() * (ry * ry).sum()))
    return float((rx * ry).sum() / denom) if denom else 0.0
