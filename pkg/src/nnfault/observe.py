"""Observers: value statistics and golden-vs-faulty divergence metrics."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import ConfigError, ObserverError
from .graph import Callback, Graph, HookPoint, Site, forward
from .tensor import Tensor

DEFAULT_DUMP = 65536


class ObserverKind(enum.Enum):
    MinMax = "minmax"
    AffectedCount = "affected"
    MAE = "mae"
    RMSE = "rmse"
    ValueDump = "dump"

    @property
    def divergence(self) -> bool:
        return self in (ObserverKind.AffectedCount, ObserverKind.MAE, ObserverKind.RMSE)


@dataclass(frozen=True)
class ObserverSpec:
    kind: ObserverKind
    max_elements: int = DEFAULT_DUMP

    def __post_init__(self):
        if self.max_elements <= 0:
            raise ConfigError("dump observer needs max_elements > 0")

    @classmethod
    def parse(cls, text: str) -> "ObserverSpec":
        name, _, arg = text.strip().partition(":")
        try:
            kind = ObserverKind(name)
        except ValueError:
            raise ConfigError(f"unknown observer {name!r}") from None
        if arg and kind is ObserverKind.ValueDump:
            try:
                return cls(kind, int(arg))
            except ValueError:
                raise ConfigError(f"malformed dump size {arg!r}") from None
        if arg:
            raise ConfigError(f"observer {name!r} takes no argument")
        return cls(kind)

    def text(self) -> str:
        if self.kind is ObserverKind.ValueDump and self.max_elements != DEFAULT_DUMP:
            return f"dump:{self.max_elements}"
        return self.kind.value


@dataclass
class ObservationRecord:
    layer_path: str
    kind: ObserverKind
    max_elements: int = DEFAULT_DUMP
    n: int = 0
    samples: int = 0
    abs_sum: float = 0.0
    sq_sum: float = 0.0
    min: float = math.inf
    max: float = -math.inf
    affected: int = 0
    dumps: list[tuple[tuple[int, ...], np.ndarray]] = field(default_factory=list)
    truncated: bool = False

    @classmethod
    def for_spec(cls, path: str, spec: ObserverSpec) -> "ObservationRecord":
        return cls(path, spec.kind, spec.max_elements)

    @property
    def dumped(self) -> int:
        return sum(v.size for _, v in self.dumps)

    def merge(self, other: "ObservationRecord") -> "ObservationRecord":
        if (other.layer_path, other.kind) != (self.layer_path, self.kind):
            raise ObserverError("cannot merge records of different layers or kinds")
        out = ObservationRecord(self.layer_path, self.kind, self.max_elements)
        out.n, out.samples = self.n + other.n, self.samples + other.samples
        out.abs_sum, out.sq_sum = self.abs_sum + other.abs_sum, self.sq_sum + other.sq_sum
        out.min, out.max = min(self.min, other.min), max(self.max, other.max)
        out.affected = self.affected + other.affected
        out.dumps = list(self.dumps)
        out.truncated = self.truncated
        for shape, values in other.dumps:
            _store_dump(out, shape, values)
        out.truncated |= other.truncated
        return out

    def finalize(self) -> dict[str, float]:
        """Metric name -> value. Empty records report zero divergence."""
        k = self.kind
        if k is ObserverKind.MinMax:
            return {"min": self.min, "max": self.max}
        if k is ObserverKind.AffectedCount:
            return {
                "affected": float(self.affected),
                "affected_mean": self.affected / self.samples if self.samples else 0.0,
                "affected_fraction": self.affected / self.n if self.n else 0.0,
            }
        if k is ObserverKind.MAE:
            return {"mae": self.abs_sum / self.n if self.n else 0.0}
        if k is ObserverKind.RMSE:
            return {"rmse": math.sqrt(self.sq_sum / self.n) if self.n else 0.0}
        return {"dumped": float(self.dumped)}


def update_minmax(rec: ObservationRecord, tensor: Tensor) -> None:
    v = tensor.to_float()
    v = v[~np.isnan(v)]
    rec.n += tensor.size
    if v.size:
        rec.min = min(rec.min, float(v.min()))
        rec.max = max(rec.max, float(v.max()))


def compare(rec: ObservationRecord, golden: Tensor, faulty: Tensor, samples: int | None = None) -> None:
    """Accumulate divergence of ``faulty`` from ``golden``; NaN differences propagate."""
    if golden.shape != faulty.shape:
        raise ObserverError(f"{rec.layer_path}: shape {golden.shape} != {faulty.shape}")
    if not rec.kind.divergence:
        raise ObserverError(f"{rec.kind.value} observer does not compare runs")
    g = golden.to_float().astype(np.float64)
    f = faulty.to_float().astype(np.float64)
    rec.n += g.size
    rec.samples += 1 if samples is None else samples
    if rec.kind is ObserverKind.AffectedCount:
        rec.affected += int(np.count_nonzero(~(g == f)))
        return
    with np.errstate(invalid="ignore", over="ignore"):
        d = f - g
        if rec.kind is ObserverKind.MAE:
            rec.abs_sum += float(np.abs(d).sum())
        else:
            rec.sq_sum += float(np.square(d).sum())


def _store_dump(rec: ObservationRecord, shape, values: np.ndarray) -> None:
    room = rec.max_elements - rec.dumped
    if room <= 0:
        rec.truncated = True
        return
    if values.size > room:
        values = values[:room]
        rec.truncated = True
    rec.dumps.append((tuple(shape), values.copy()))


def dump_values(rec: ObservationRecord, tensor: Tensor) -> None:
    _store_dump(rec, tensor.shape, tensor.to_float().reshape(-1))


Records = dict[str, dict[ObserverKind, ObservationRecord]]


def new_records(observers: Mapping[str, Iterable[ObserverSpec]]) -> Records:
    return {path: {s.kind: ObservationRecord.for_spec(path, s) for s in specs} for path, specs in observers.items()}


def merge_records(a: Records, b: Records) -> Records:
    out: Records = {}
    for path in list(a) + [p for p in b if p not in a]:
        ra, rb = a.get(path, {}), b.get(path, {})
        out[path] = {}
        for kind in list(ra) + [k for k in rb if k not in ra]:
            if kind in ra and kind in rb:
                out[path][kind] = ra[kind].merge(rb[kind])
            else:
                out[path][kind] = ra.get(kind) or rb[kind]
    return out


def _capture(store: dict, path: str) -> Callback:
    def hook(t: Tensor) -> Tensor:
        store[path] = t
        return t
    return hook


def dual_forward(
    graph: Graph,
    input,
    hooks: Iterable[tuple[HookPoint, Callback]],
    observers: Mapping[str, Iterable[ObserverSpec]],
    records: Records | None = None,
    golden: tuple[Tensor, dict[str, Tensor]] | None = None,
) -> tuple[Tensor, Tensor, Records]:
    """Golden pass (no injection hooks), then faulty pass, then per-layer comparison.

    Observed values are layer outputs after any hooks on that layer ran.
    Pass ``golden`` (logits and captured activations from an earlier call) to
    skip recomputing the golden pass for a repeated input.
    """
    observers = {p: list(s) for p, s in observers.items()}
    for path in observers:
        graph.layer(path)
    records = new_records(observers) if records is None else records
    for path, specs in observers.items():
        slot = records.setdefault(path, {})
        for s in specs:
            slot.setdefault(s.kind, ObservationRecord.for_spec(path, s))
    paths = list(observers)

    if golden is None:
        golden = golden_pass(graph, input, paths)
    golden_out, golden_acts = golden
    faulty_acts: dict[str, Tensor] = {}
    hooks = list(hooks) + [(HookPoint(p, Site.ActivationPost), _capture(faulty_acts, p)) for p in paths]
    faulty_out = forward(graph, input, hooks)

    for path in paths:
        g, f = golden_acts[path], faulty_acts[path]
        batch = g.shape[0] if len(g.shape) > len(graph.out_shapes[path]) else 1
        for kind, rec in records[path].items():
            if kind.divergence:
                compare(rec, g, f, batch)
            elif kind is ObserverKind.MinMax:
                update_minmax(rec, f)
            else:
                dump_values(rec, f)
    return golden_out, faulty_out, records


def golden_pass(graph: Graph, input, paths: Iterable[str]) -> tuple[Tensor, dict[str, Tensor]]:
    acts: dict[str, Tensor] = {}
    out = forward(graph, input, [(HookPoint(p, Site.ActivationPost), _capture(acts, p)) for p in paths])
    return out, acts


def records_table(records: Records) -> list[tuple[str, str, int, float]]:
    rows = []
    for path, by_kind in records.items():
        for kind, rec in by_kind.items():
            for metric, value in rec.finalize().items():
                n = rec.samples if metric == "affected_mean" else rec.n
                rows.append((path, metric, n, value))
    return rows


def write_records(records: Records, path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["layer", "kind", "n", "value"])
        for layer, metric, n, value in records_table(records):
            out.writerow([layer, metric, n, repr(float(value))])


def write_dump(rec: ObservationRecord, directory) -> Path:
    """Write ``<layer>.csv``: a ``# shape=`` header line, then one value per line."""
    path = Path(directory) / f"{rec.layer_path}.csv"
    shape = rec.dumps[0][0] if rec.dumps else ()
    with open(path, "w") as fh:
        fh.write(f"# shape={'x'.join(map(str, shape))} truncated={int(rec.truncated)}\n")
        for _, values in rec.dumps:
            fh.writelines(f"{float(v)!r}\n" for v in values)
    return path


def read_dump(path) -> np.ndarray:
    with open(path) as fh:
        header = fh.readline()
        values = np.array([float(line) for line in fh if line.strip()], dtype=np.float32)
    fields = dict(item.split("=", 1) for item in header[1:].split())
    shape = tuple(int(s) for s in fields["shape"].split("x") if s)
    if fields.get("truncated") == "0" and shape and values.size == int(np.prod(shape)):
        return values.reshape(shape)
    return values
