"""Forward-only inference graph with weight and activation hook points.

Layers run in list order on float32 batches shaped ``(N, *input_shape)``.
Hooks are plain callables ``Tensor -> Tensor`` attached to a
:class:`HookPoint`; they see weights (a private copy) before a weighted layer
runs, the layer input, and the layer output.
"""

from __future__ import annotations

import contextlib
import enum
import fnmatch
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import GraphError, HookError
from .tensor import Tensor

Callback = Callable[[Tensor], Tensor]


class LayerKind(enum.Enum):
    Conv2d = "Conv2d"
    Linear = "Linear"
    ReLU = "ReLU"
    MaxPool2d = "MaxPool2d"
    AvgPool2d = "AvgPool2d"
    Flatten = "Flatten"
    Add = "Add"
    Softmax = "Softmax"

    @property
    def weighted(self) -> bool:
        return self in (LayerKind.Conv2d, LayerKind.Linear)


class Site(enum.Enum):
    WeightPre = "weight"
    ActivationPre = "pre"
    ActivationPost = "post"


@dataclass(frozen=True)
class HookPoint:
    path: str
    site: Site = Site.ActivationPost


@dataclass
class LayerNode:
    path: str
    kind: LayerKind
    params: dict = field(default_factory=dict)
    weight: Tensor | None = None
    bias: Tensor | None = None


@dataclass
class Graph:
    layers: list[LayerNode]
    input_shape: tuple[int, ...]
    out_shapes: dict[str, tuple[int, ...]] = field(init=False, repr=False)

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.out_shapes = _infer_shapes(self.layers, self.input_shape)
        self._index = {node.path: node for node in self.layers}

    @property
    def paths(self) -> list[str]:
        return [node.path for node in self.layers]

    def layer(self, path: str) -> LayerNode:
        try:
            return self._index[path]
        except KeyError:
            raise GraphError(f"no layer named {path!r}") from None

    def copy(self) -> "Graph":
        """Copy with fresh layer nodes; weight tensors are shared, not cloned."""
        return Graph([replace(node, params=dict(node.params)) for node in self.layers], self.input_shape)

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.out_shapes[self.layers[-1].path]


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _conv_extent(size: int, k: int, s: int, p: int, path: str) -> int:
    span = size + 2 * p - k
    if span < 0 or span % s:
        raise GraphError(f"{path}: output extent ({size}+2*{p}-{k})/{s}+1 is not integral")
    return span // s + 1


def _infer_shapes(layers: Sequence[LayerNode], input_shape: tuple[int, ...]) -> dict:
    shapes: dict[str, tuple[int, ...]] = {}
    shape = input_shape
    for node in layers:
        if node.path in shapes:
            raise GraphError(f"duplicate layer path {node.path!r}")
        p = node.params
        kind = node.kind
        if kind.weighted and node.weight is None:
            raise GraphError(f"{node.path}: weighted layer without weight")
        if kind is LayerKind.Conv2d:
            if len(shape) != 3:
                raise GraphError(f"{node.path}: Conv2d needs (C,H,W) input, got {shape}")
            kh, kw = _pair(p.get("k", node.weight.shape[2:]))
            expect = (int(p.get("out", node.weight.shape[0])), int(p.get("in", shape[0])), kh, kw)
            if expect[1] != shape[0]:
                raise GraphError(f"{node.path}: expects {expect[1]} channels, got {shape[0]}")
            if node.weight.shape != expect:
                raise GraphError(f"{node.path}: weight shape {node.weight.shape} != {expect}")
            s, pad = int(p.get("stride", 1)), int(p.get("pad", 0))
            shape = (
                expect[0],
                _conv_extent(shape[1], kh, s, pad, node.path),
                _conv_extent(shape[2], kw, s, pad, node.path),
            )
        elif kind is LayerKind.Linear:
            if len(shape) != 1:
                raise GraphError(f"{node.path}: Linear needs flat input, got {shape}")
            expect = (int(p.get("out", node.weight.shape[0])), int(p.get("in", shape[0])))
            if expect[1] != shape[0] or node.weight.shape != expect:
                raise GraphError(f"{node.path}: weight shape {node.weight.shape} incompatible with input {shape}")
            shape = (expect[0],)
        elif kind in (LayerKind.MaxPool2d, LayerKind.AvgPool2d):
            if len(shape) != 3:
                raise GraphError(f"{node.path}: pooling needs (C,H,W) input, got {shape}")
            k = int(p.get("k", 2))
            s = int(p.get("stride", k))
            shape = (shape[0], _conv_extent(shape[1], k, s, 0, node.path), _conv_extent(shape[2], k, s, 0, node.path))
        elif kind is LayerKind.Flatten:
            shape = (int(np.prod(shape)),)
        elif kind is LayerKind.Add:
            src = p.get("src")
            if src not in shapes:
                raise GraphError(f"{node.path}: residual source {src!r} must precede it")
            if shapes[src] != shape:
                raise GraphError(f"{node.path}: residual shape {shapes[src]} != {shape}")
        if node.bias is not None and node.bias.shape != (shape[0],):
            raise GraphError(f"{node.path}: bias shape {node.bias.shape} != {(shape[0],)}")
        shapes[node.path] = shape
    return shapes


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlation of ``(N,C,H,W)`` input with ``(K,C,kh,kw)`` kernels."""
    n, c, h, w = x.shape
    k, wc, kh, kw = weight.shape
    if wc != c:
        raise GraphError(f"kernel expects {wc} channels, input has {c}")
    ho = _conv_extent(h, kh, stride, padding, "conv2d")
    wo = _conv_extent(w, kw, stride, padding, "conv2d")
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    out = cols @ weight.reshape(k, -1).T.astype(np.float32)
    if bias is not None:
        out += bias.astype(np.float32)
    return np.ascontiguousarray(out.reshape(n, ho, wo, k).transpose(0, 3, 1, 2), dtype=np.float32)


def _pool(x: np.ndarray, k: int, stride: int, op: str) -> np.ndarray:
    n, c, h, w = x.shape
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    acc = None
    for i in range(k):
        for j in range(k):
            tap = x[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
            if acc is None:
                acc = tap.copy()
            elif op == "max":
                np.maximum(acc, tap, out=acc)
            else:
                acc += tap
    if op == "avg":
        acc /= np.float32(k * k)
    return acc


def _run_layer(node: LayerNode, x: np.ndarray, weight: np.ndarray | None, outputs: dict) -> np.ndarray:
    p = node.params
    bias = None if node.bias is None else node.bias.to_float()
    kind = node.kind
    if kind is LayerKind.Conv2d:
        return conv2d(x, weight, bias, int(p.get("stride", 1)), int(p.get("pad", 0)))
    if kind is LayerKind.Linear:
        out = x @ weight.T
        if bias is not None:
            out = out + bias
        return out.astype(np.float32, copy=False)
    if kind is LayerKind.ReLU:
        return np.maximum(x, np.float32(0))
    if kind is LayerKind.MaxPool2d:
        k = int(p.get("k", 2))
        return _pool(x, k, int(p.get("stride", k)), "max")
    if kind is LayerKind.AvgPool2d:
        k = int(p.get("k", 2))
        return _pool(x, k, int(p.get("stride", k)), "avg")
    if kind is LayerKind.Flatten:
        return x.reshape(x.shape[0], -1)
    if kind is LayerKind.Add:
        return x + outputs[p["src"]]
    if kind is LayerKind.Softmax:
        z = x - np.max(x, axis=-1, keepdims=True)
        e = np.exp(z)
        return (e / e.sum(axis=-1, keepdims=True)).astype(np.float32)
    raise GraphError(f"unsupported layer kind {kind}")


def _call_hooks(callbacks: list[Callback], t: Tensor, where: HookPoint) -> Tensor:
    for cb in callbacks:
        out = cb(t)
        if not isinstance(out, Tensor) or out.shape != t.shape or out.dtype is not t.dtype:
            got = out.shape if isinstance(out, Tensor) else type(out).__name__
            raise HookError(f"hook at {where.path}/{where.site.value} returned {got}, expected {t.shape}")
        t = out
    return t


def forward(graph: Graph, input: Tensor | np.ndarray, hooks: Iterable[tuple[HookPoint, Callback]] = ()) -> Tensor:
    """Run the graph on one sample or a batch; returns the final layer output."""
    x = input.to_float() if isinstance(input, Tensor) else np.asarray(input, dtype=np.float32)
    batched = x.shape[1:] == graph.input_shape
    if not batched:
        if x.shape != graph.input_shape:
            raise GraphError(f"input shape {x.shape} does not match graph input {graph.input_shape}")
        x = x[None]
    x = np.ascontiguousarray(x, dtype=np.float32)

    table: dict[tuple[str, Site], list[Callback]] = {}
    for point, cb in hooks:
        if point.site is Site.WeightPre and not graph.layer(point.path).kind.weighted:
            raise HookError(f"weight hook on parameter-free layer {point.path}")
        table.setdefault((point.path, point.site), []).append(cb)

    sources = {node.params["src"] for node in graph.layers if node.kind is LayerKind.Add}
    outputs: dict[str, np.ndarray] = {}
    for node in graph.layers:
        path = node.path
        cbs = table.get((path, Site.ActivationPre))
        if cbs:
            x = _call_hooks(cbs, Tensor(x), HookPoint(path, Site.ActivationPre)).data
        weight = None
        if node.kind.weighted:
            cbs = table.get((path, Site.WeightPre))
            w = node.weight
            if cbs:
                w = _call_hooks(cbs, w.copy(), HookPoint(path, Site.WeightPre))
            weight = w.to_float()
        x = _run_layer(node, x, weight, outputs)
        cbs = table.get((path, Site.ActivationPost))
        if cbs:
            x = _call_hooks(cbs, Tensor(x), HookPoint(path, Site.ActivationPost)).data
        if path in sources:
            outputs[path] = x
    return Tensor(x if batched else x[0])


def list_paths(graph: Graph, pattern: str) -> list[str]:
    return [p for p in graph.paths if fnmatch.fnmatchcase(p, pattern)]


@contextlib.contextmanager
def permanent_weights(graph: Graph, hooks: Iterable[tuple[HookPoint, Callback]]):
    """Write weight-hook results into ``graph`` for the duration of the block.

    Yields the remaining non-weight hooks. Original weight tensors are put back
    on exit, so the graph must not be shared with concurrent readers meanwhile.
    """
    saved: dict[str, Tensor] = {}
    rest = []
    try:
        for point, cb in hooks:
            if point.site is not Site.WeightPre:
                rest.append((point, cb))
                continue
            node = graph.layer(point.path)
            if not node.kind.weighted:
                raise HookError(f"weight hook on parameter-free layer {point.path}")
            saved.setdefault(point.path, node.weight)
            node.weight = _call_hooks([cb], node.weight.copy(), point)
        yield rest
    finally:
        for path, w in saved.items():
            graph.layer(path).weight = w
