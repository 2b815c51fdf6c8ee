"""Simulated quantization around fault sites, plus dynamic-range calibration."""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .graph import Graph, HookPoint, Site, forward
from .tensor import DType, Tensor, int_dtype_for


class QuantMethod(enum.Enum):
    NONE = "none"
    FIXED = "fixed"
    LAYERWISE = "layerwise"
    FLOAT16 = "float16"


@dataclass(frozen=True)
class QuantSpec:
    method: QuantMethod = QuantMethod.NONE
    int_bits: int = 0
    frac_bits: int = 0
    total_bits: int = 0
    scale: float | None = None

    def __post_init__(self):
        if self.method is QuantMethod.FIXED:
            if self.int_bits < 1 or self.frac_bits < 0 or self.int_bits + self.frac_bits > 32:
                raise ConfigError(f"invalid fixed-point format {self.int_bits}.{self.frac_bits}")
        elif self.method is QuantMethod.LAYERWISE:
            if not 2 <= self.total_bits <= 32:
                raise ConfigError(f"layerwise bit width {self.total_bits} outside [2, 32]")
        if self.scale is not None and not self.scale > 0:
            raise ConfigError(f"scale override must be positive, got {self.scale}")

    @classmethod
    def fixed(cls, int_bits: int, frac_bits: int, scale: float | None = None) -> "QuantSpec":
        return cls(QuantMethod.FIXED, int_bits=int_bits, frac_bits=frac_bits, scale=scale)

    @classmethod
    def layerwise(cls, total_bits: int, scale: float | None = None) -> "QuantSpec":
        return cls(QuantMethod.LAYERWISE, total_bits=total_bits, scale=scale)

    @classmethod
    def parse(cls, text: str, scale: float | None = None) -> "QuantSpec":
        """Parse ``none``, ``float16``, ``fixed:<m>.<n>`` or ``layerwise:<bits>``."""
        name, _, arg = text.strip().partition(":")
        try:
            if name == "none" and not arg:
                return cls(scale=scale)
            if name == "float16" and not arg:
                return cls(QuantMethod.FLOAT16, scale=scale)
            if name == "fixed":
                m, n = arg.split(".")
                return cls.fixed(int(m), int(n), scale)
            if name == "layerwise":
                return cls.layerwise(int(arg), scale)
        except ValueError:
            pass
        raise ConfigError(f"malformed quantization method {text!r}")

    def text(self) -> str:
        if self.method is QuantMethod.FIXED:
            return f"fixed:{self.int_bits}.{self.frac_bits}"
        if self.method is QuantMethod.LAYERWISE:
            return f"layerwise:{self.total_bits}"
        return self.method.value

    @property
    def bits(self) -> int:
        """Width of the word that faults act on."""
        if self.method is QuantMethod.FIXED:
            return self.int_bits + self.frac_bits
        if self.method is QuantMethod.LAYERWISE:
            return self.total_bits
        if self.method is QuantMethod.FLOAT16:
            return 16
        return 32

    @property
    def code_range(self) -> tuple[int, int]:
        b = self.bits
        return -(1 << (b - 1)), (1 << (b - 1)) - 1


@dataclass(frozen=True)
class DynamicRange:
    min_val: float
    max_val: float

    def __post_init__(self):
        if not self.min_val <= self.max_val:
            raise ValueError(f"min {self.min_val} > max {self.max_val}")

    @property
    def absmax(self) -> float:
        return max(abs(self.min_val), abs(self.max_val))


def round_half_away(v: np.ndarray) -> np.ndarray:
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def step_size(spec: QuantSpec, range: DynamicRange | None = None) -> float:
    """Value of one code step (the quantization resolution)."""
    if spec.method is QuantMethod.FIXED:
        return 2.0 ** -spec.frac_bits * (spec.scale or 1.0)
    if spec.method is QuantMethod.LAYERWISE:
        if range is None:
            raise ConfigError("layerwise quantization needs a dynamic range")
        amax = range.absmax
        base = amax / ((1 << (spec.total_bits - 1)) - 1) if amax > 0 else 1.0
        return base * (spec.scale or 1.0)
    raise ConfigError(f"{spec.method.value} has no integer step")


def quantize(x: Tensor, spec: QuantSpec, range: DynamicRange | None = None) -> Tensor:
    if spec.method is QuantMethod.NONE:
        raise ConfigError("quantize called with method none")
    values = x.to_float()
    if spec.method is QuantMethod.FLOAT16:
        return Tensor.from_float(values, DType.F16)
    step = step_size(spec, range)
    lo, hi = spec.code_range
    # NaN has no code; it maps to 0, infinities saturate.
    v = np.nan_to_num(values.astype(np.float64) / step, nan=0.0, posinf=hi, neginf=lo)
    q = np.clip(round_half_away(v), lo, hi)
    return Tensor(q.astype(np.int64), int_dtype_for(spec.bits), spec.bits)


def dequantize(q: Tensor, spec: QuantSpec, range: DynamicRange | None = None) -> Tensor:
    if spec.method is QuantMethod.NONE:
        raise ConfigError("dequantize called with method none")
    if spec.method is QuantMethod.FLOAT16:
        return Tensor(q.to_float(), DType.F32)
    step = step_size(spec, range)
    return Tensor((q.data.astype(np.float64) * step).astype(np.float32), DType.F32)


def weight_key(path: str) -> str:
    return f"{path}:weight"


def input_key(path: str) -> str:
    return f"{path}:input"


def calibrate(graph: Graph, inputs) -> dict[str, DynamicRange]:
    """Golden-run output ranges per layer, plus ``<path>:input`` and ``<path>:weight`` ranges."""
    if isinstance(inputs, Tensor):
        batch = inputs.to_float()
    elif isinstance(inputs, np.ndarray):
        batch = inputs
    else:
        items = [t.to_float() if isinstance(t, Tensor) else np.asarray(t, np.float32) for t in inputs]
        batch = np.stack(items) if items else np.empty((0,) + graph.input_shape, np.float32)
    if batch.shape == graph.input_shape:
        batch = batch[None]
    if batch.shape[0] == 0:
        raise ValueError("calibration needs at least one input")

    extremes: dict[str, list[float]] = {}

    def recorder(path):
        def hook(t: Tensor) -> Tensor:
            v = t.to_float()
            lo, hi = float(v.min()), float(v.max())
            cur = extremes.setdefault(path, [lo, hi])
            cur[0], cur[1] = min(cur[0], lo), max(cur[1], hi)
            return t
        return hook

    hooks = [(HookPoint(p, Site.ActivationPost), recorder(p)) for p in graph.paths]
    hooks += [(HookPoint(p, Site.ActivationPre), recorder(input_key(p))) for p in graph.paths]
    forward(graph, batch, hooks)
    ranges = {p: DynamicRange(*extremes[p]) for p in graph.paths}
    ranges.update({input_key(p): DynamicRange(*extremes[input_key(p)]) for p in graph.paths})
    for node in graph.layers:
        if node.weight is not None:
            w = node.weight.to_float()
            ranges[weight_key(node.path)] = DynamicRange(float(w.min()), float(w.max()))
    return ranges


def write_ranges(ranges: dict[str, DynamicRange], path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["path", "min", "max"])
        for key, r in ranges.items():
            out.writerow([key, repr(r.min_val), repr(r.max_val)])


def read_ranges(path) -> dict[str, DynamicRange]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {row["path"]: DynamicRange(float(row["min"]), float(row["max"])) for row in rows}

