"""Model description, weight and dataset files; the deterministic fixture model.

Model description (text), one layer per line::

    input Input shape=1,28,28
    model.conv1 Conv2d in=1 out=6 k=5 stride=1 pad=0

Weights (``MRFW``) and datasets (``MRFD``) are little-endian binaries; see
:func:`write_weights` and :func:`write_dataset` for the layouts.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import (
    GraphError,
    LoadError,
    MagicError,
    MissingTensorError,
    ShapeMismatchError,
    TruncatedFileError,
    VersionError,
)
from .graph import Graph, LayerKind, LayerNode, forward
from .tensor import Tensor

WEIGHTS_MAGIC = b"MRFW"
DATA_MAGIC = b"MRFD"
WEIGHTS_VERSION = 1
FIXTURE_SEED = 42
FIXTURE_SAMPLES = 256
EVAL_BATCH = 256

LENET = """\
input Input shape=1,28,28
model.conv1 Conv2d in=1 out=6 k=5
model.relu1 ReLU
model.pool1 MaxPool2d k=2
model.conv2 Conv2d in=6 out=16 k=5
model.relu2 ReLU
model.pool2 MaxPool2d k=2
model.flatten Flatten
model.fc1 Linear in=256 out=120
model.relu3 ReLU
model.fc2 Linear in=120 out=10
"""


@dataclass
class Dataset:
    inputs: np.ndarray  # (N, *sample_shape) float32
    labels: np.ndarray  # (N,) int64

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: int | None) -> "Dataset":
        if n is None or n >= len(self):
            return self
        return Dataset(self.inputs[:n], self.labels[:n])


@dataclass
class LayerDesc:
    path: str
    kind: LayerKind
    params: dict


def _param(value: str):
    if "," in value:
        return tuple(int(v) for v in value.split(","))
    try:
        return int(value)
    except ValueError:
        return value


def parse_description(text: str) -> tuple[tuple[int, ...], list[LayerDesc]]:
    input_shape = None
    layers = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) < 2:
            raise GraphError(f"line {lineno}: expected 'path kind key=value ...'")
        path, kind = parts[0], parts[1]
        try:
            params = {k: _param(v) for k, v in (p.split("=", 1) for p in parts[2:])}
        except ValueError:
            raise GraphError(f"line {lineno}: malformed parameter list") from None
        if kind == "Input":
            shape = params.get("shape")
            input_shape = shape if isinstance(shape, tuple) else (shape,)
            continue
        try:
            layers.append(LayerDesc(path, LayerKind(kind), params))
        except ValueError:
            raise GraphError(f"line {lineno}: unknown layer kind {kind!r}") from None
    if input_shape is None:
        raise GraphError("model description has no Input line")
    return input_shape, layers


def format_description(graph: Graph) -> str:
    lines = [f"input Input shape={','.join(map(str, graph.input_shape))}"]
    for node in graph.layers:
        params = " ".join(
            f"{k}={','.join(map(str, v)) if isinstance(v, tuple) else v}" for k, v in node.params.items()
        )
        lines.append(f"{node.path} {node.kind.value} {params}".rstrip())
    return "\n".join(lines) + "\n"


def write_weights(tensors: dict[str, np.ndarray], fh) -> None:
    """``MRFW``, u32 version, u32 count, then per tensor: u16 name length, name,
    u8 dtype (0 = f32), u8 ndim, u32 dims, raw f32 data."""
    fh.write(WEIGHTS_MAGIC)
    fh.write(struct.pack("<II", WEIGHTS_VERSION, len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        fh.write(struct.pack("<H", len(raw)) + raw)
        fh.write(struct.pack("<BB", 0, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes(order="C"))


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data, self.pos, self.what = data, 0, what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"{self.what}: truncated at byte {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_weights(data: bytes) -> dict[str, np.ndarray]:
    r = _Reader(data, "weights")
    if r.take(4) != WEIGHTS_MAGIC:
        raise MagicError("weights file does not start with MRFW")
    version, count = r.unpack("<II")
    if version != WEIGHTS_VERSION:
        raise VersionError(f"unsupported weights version {version}")
    out = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code != 0:
            raise LoadError(f"tensor {name}: unsupported dtype code {code}")
        dims = r.unpack(f"<{ndim}I")
        n = int(np.prod(dims))
        out[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(data):
        raise LoadError(f"weights: {len(data) - r.pos} trailing bytes")
    return out


def build_graph(input_shape, layers: list[LayerDesc], tensors: dict[str, np.ndarray]) -> Graph:
    nodes = []
    for d in layers:
        weight = bias = None
        if d.kind.weighted:
            key = f"{d.path}.weight"
            if key not in tensors:
                raise MissingTensorError(f"no tensor {key!r} for weighted layer {d.path}")
            weight = Tensor(tensors[key])
            if f"{d.path}.bias" in tensors:
                bias = Tensor(tensors[f"{d.path}.bias"])
        nodes.append(LayerNode(d.path, d.kind, dict(d.params), weight, bias))
    try:
        return Graph(nodes, input_shape)
    except GraphError as exc:
        raise ShapeMismatchError(str(exc)) from None


def load_model(desc_path, weights_path) -> Graph:
    text = Path(desc_path).read_text(encoding="utf-8")
    tensors = read_weights(Path(weights_path).read_bytes())
    return build_graph(*parse_description(text), tensors)


def graph_tensors(graph: Graph) -> dict[str, np.ndarray]:
    out = {}
    for node in graph.layers:
        if node.weight is not None:
            out[f"{node.path}.weight"] = node.weight.to_float()
        if node.bias is not None:
            out[f"{node.path}.bias"] = node.bias.to_float()
    return out


def save_model(graph: Graph, desc_path, weights_path) -> None:
    Path(desc_path).write_text(format_description(graph), encoding="utf-8")
    with open(weights_path, "wb") as fh:
        write_weights(graph_tensors(graph), fh)


def write_dataset(ds: Dataset, fh) -> None:
    """``MRFD``, u32 count, then per sample: u16 label, raw f32 pixels."""
    fh.write(DATA_MAGIC)
    fh.write(struct.pack("<I", len(ds)))
    for x, y in zip(ds.inputs, ds.labels):
        fh.write(struct.pack("<H", int(y)))
        fh.write(np.asarray(x, dtype="<f4").tobytes(order="C"))


def read_dataset(data: bytes, sample_shape) -> Dataset:
    r = _Reader(data, "dataset")
    if r.take(4) != DATA_MAGIC:
        raise MagicError("dataset file does not start with MRFD")
    (count,) = r.unpack("<I")
    per = int(np.prod(sample_shape))
    if len(data) - 8 != count * (2 + 4 * per):
        if len(data) - 8 < count * (2 + 4 * per):
            raise TruncatedFileError(f"dataset: {count} samples of shape {tuple(sample_shape)} do not fit")
        raise ShapeMismatchError(f"dataset size does not match {count} samples of shape {tuple(sample_shape)}")
    labels = np.empty(count, np.int64)
    inputs = np.empty((count, per), np.float32)
    for i in range(count):
        (labels[i],) = r.unpack("<H")
        inputs[i] = np.frombuffer(r.take(4 * per), dtype="<f4")
    return Dataset(inputs.reshape((count,) + tuple(sample_shape)), labels)


def load_dataset(path, sample_shape) -> Dataset:
    return read_dataset(Path(path).read_bytes(), sample_shape)


def predict(graph: Graph, inputs: np.ndarray, hooks=(), batch: int = EVAL_BATCH) -> np.ndarray:
    """Logits for ``inputs`` evaluated in fixed-size chunks."""
    hooks = list(hooks)
    outs = [forward(graph, inputs[i : i + batch], hooks).data for i in range(0, len(inputs), batch)]
    return np.concatenate(outs)


def generate_fixture(seed: int = FIXTURE_SEED, samples: int = FIXTURE_SAMPLES) -> tuple[str, bytes, bytes]:
    """Model text, weights bytes and dataset bytes; identical for identical seeds.

    Weights are uniform(-0.1, 0.1); inputs uniform [-1, 1); labels are the
    model's own golden predictions.
    """
    input_shape, layers = parse_description(LENET)
    rng = np.random.default_rng(seed)
    probe = Graph(
        [
            LayerNode(d.path, d.kind, dict(d.params), Tensor(np.zeros(_weight_shape(d), np.float32)) if d.kind.weighted else None)
            for d in layers
        ],
        input_shape,
    )
    tensors = {}
    for node in probe.layers:
        if node.kind.weighted:
            tensors[f"{node.path}.weight"] = rng.uniform(-0.1, 0.1, node.weight.shape).astype(np.float32)
            tensors[f"{node.path}.bias"] = rng.uniform(-0.1, 0.1, probe.out_shapes[node.path][:1]).astype(np.float32)
    graph = build_graph(input_shape, layers, tensors)
    inputs = np.random.default_rng([seed, 1]).uniform(-1.0, 1.0, (samples,) + input_shape).astype(np.float32)
    labels = predict(graph, inputs).argmax(axis=1)

    wbuf, dbuf = io.BytesIO(), io.BytesIO()
    write_weights(tensors, wbuf)
    write_dataset(Dataset(inputs, labels), dbuf)
    return format_description(graph), wbuf.getvalue(), dbuf.getvalue()


def _weight_shape(d: LayerDesc) -> tuple[int, ...]:
    p = d.params
    if d.kind is LayerKind.Conv2d:
        k = p["k"]
        kh, kw = k if isinstance(k, tuple) else (k, k)
        return (p["out"], p["in"], kh, kw)
    return (p["out"], p["in"])


FIXTURE_FILES = ("model.txt", "weights.mrfw", "data.mrfd")


def write_fixture(directory, seed: int = FIXTURE_SEED) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    desc, weights, data = generate_fixture(seed)
    paths = [directory / name for name in FIXTURE_FILES]
    paths[0].write_text(desc, encoding="utf-8")
    paths[1].write_bytes(weights)
    paths[2].write_bytes(data)
    return paths


def load_fixture() -> tuple[Graph, Dataset]:
    """The bundled seed-42 LeNet-style fixture model and its 256-sample dataset."""
    base = resources.files("nnfault") / "fixtures"
    desc = (base / "model.txt").read_text(encoding="utf-8")
    graph = build_graph(*parse_description(desc), read_weights((base / "weights.mrfw").read_bytes()))
    return graph, read_dataset((base / "data.mrfd").read_bytes(), graph.input_shape)
