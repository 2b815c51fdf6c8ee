"""Injection configuration: EasyConfig files, configuration trees, resolution.

Both file styles parse into the same :class:`ConfigNode` tree. Each node has
a path pattern (its header, joined with its ancestors' by ``.``) and a set of
optional fields. A node applies to a layer when its full pattern matches the
layer path or a dotted prefix of it. Resolution is per field: the deepest
applicable node that sets a field wins; among equally deep nodes the one
declared last wins.

EasyConfig::

    [injection]
    layers = model.conv*, model.fc1
    target = weight
    mode = ber
    ber = 1e-6
    error_model = bitflip_random
    [quantize]
    method = fixed:3.13
    [observe]
    observers = rmse, affected

Keys before the first section belong to an implicit ``[injection]`` section;
each ``[injection]`` section becomes one enabled child node per glob.
``[quantize]`` and ``[observe]`` keys set root defaults.

Tree file::

    method = fixed:3.13
    model:
      ber = 1e-6
      conv1:
        enabled = true
"""

from __future__ import annotations

import fnmatch
from dataclasses import dataclass, field, replace
from typing import Any, Iterable

from .errors import ConfigError, ParseError
from .fault import ErrorModelSpec, Injector, Rng, SelectMode, SelectorSpec, Sampling, SiteMask, Target
from .graph import Callback, Graph, HookPoint, Site
from .observe import ObservationRecord, ObserverKind, ObserverSpec, Records, dump_values, update_minmax
from .quant import DynamicRange, QuantMethod, QuantSpec, input_key, weight_key

KEYS = (
    "enabled",
    "target",
    "site",
    "mode",
    "ber",
    "count",
    "positions",
    "sampling",
    "error_model",
    "method",
    "scale",
    "observers",
)
SECTIONS = ("injection", "quantize", "observe")
TARGETS = ("activation", "weight", "both")
SITES = {"pre": Site.ActivationPre, "post": Site.ActivationPost}
MODES = {"ber": SelectMode.Rate, "fixed_count": SelectMode.FixedCount, "fixed_position": SelectMode.FixedPosition}
DEFAULTS = {
    "enabled": False,
    "target": "activation",
    "site": "post",
    "mode": "ber",
    "sampling": "poisson",
    "method": QuantSpec(),
    "scale": None,
    "observers": (),
}

Position = tuple[str, int, "int | None"]


@dataclass
class ConfigNode:
    segment: str = ""
    fields: dict[str, Any] = field(default_factory=dict)
    children: list["ConfigNode"] = field(default_factory=list)

    def child(self, segment: str, **fields) -> "ConfigNode":
        node = ConfigNode(segment, dict(fields))
        self.children.append(node)
        return node

    def walk(self, prefix: str = "", depth: int = 0):
        """Yield ``(full_pattern, depth, node)`` in declaration order."""
        full = f"{prefix}.{self.segment}" if prefix and self.segment else prefix or self.segment
        yield full, depth, self
        for c in self.children:
            yield from c.walk(full, depth + 1)


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_positions(text: str) -> tuple[Position, ...]:
    out = []
    for item in text.split(";"):
        item = item.strip()
        if not item:
            continue
        parts = item.rsplit(":", 2)
        if len(parts) == 3 and parts[1].lstrip("-").isdigit():
            path, off, bit = parts
            out.append((path, int(off), None if bit in ("", "*") else int(bit)))
        else:
            path, off = item.rsplit(":", 1)
            out.append((path, int(off), None))
    return tuple(out)


def parse_value(key: str, text: str) -> Any:
    """Typed value for one config key; raises ``ValueError``/``ConfigError`` when malformed."""
    text = text.strip()
    if key == "enabled":
        return _parse_bool(text)
    if key == "target":
        if text not in TARGETS:
            raise ValueError(f"target must be one of {'|'.join(TARGETS)}")
        return text
    if key == "site":
        if text not in SITES:
            raise ValueError("site must be pre or post")
        return text
    if key == "mode":
        if text not in MODES:
            raise ValueError(f"mode must be one of {'|'.join(MODES)}")
        return text
    if key == "ber":
        return float(text)
    if key == "count":
        return int(text)
    if key == "positions":
        return _parse_positions(text)
    if key == "sampling":
        Sampling(text)
        return text
    if key == "error_model":
        return ErrorModelSpec.parse(text)
    if key == "method":
        return QuantSpec.parse(text)
    if key == "scale":
        return float(text)
    if key == "observers":
        return tuple(ObserverSpec.parse(s) for s in text.split(",") if s.strip())
    raise ConfigError(f"unknown key {key!r}")


def format_value(key: str, value: Any) -> str:
    if key == "enabled":
        return "true" if value else "false"
    if key in ("ber", "scale"):
        return repr(float(value))
    if key == "positions":
        return ";".join(f"{p}:{o}:{'*' if b is None else b}" for p, o, b in value)
    if key in ("error_model", "method"):
        return value.text()
    if key == "observers":
        return ",".join(o.text() for o in value)
    return str(value)


def _split_kv(line: str, lineno: int) -> tuple[str, str]:
    key, sep, value = line.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ParseError(f"expected key = value, got {line.strip()!r}", lineno)
    return key, value.strip()


def _typed(key: str, value: str, lineno: int) -> Any:
    if key not in KEYS:
        raise ParseError(f"unknown key {key!r}", lineno)
    try:
        return parse_value(key, value)
    except (ValueError, ConfigError) as exc:
        raise ParseError(f"bad value for {key}: {exc}", lineno) from None


def _strip_comment(line: str) -> str:
    return line.split("#", 1)[0].rstrip()


def parse_easyconfig(text: str) -> ConfigNode:
    root = ConfigNode()
    groups: list[tuple[list[str] | None, dict]] = []
    section = "injection"
    implicit = True
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]") or line[1:-1].strip() not in SECTIONS:
                raise ParseError(f"unknown section {line!r}", lineno)
            section = line[1:-1].strip()
            implicit = False
            if section == "injection":
                groups.append((None, {}))
            continue
        key, value = _split_kv(line, lineno)
        if section != "injection":
            if key == "layers":
                raise ParseError("layers belongs in an [injection] section", lineno)
            root.fields[key] = _typed(key, value, lineno)
            continue
        if implicit and not groups:
            groups.append((None, {}))
        layers, fields = groups[-1]
        if key == "layers":
            globs = [g.strip() for g in value.split(",") if g.strip()]
            if not globs:
                raise ParseError("layers needs at least one pattern", lineno)
            groups[-1] = (globs, fields)
        else:
            fields[key] = _typed(key, value, lineno)
    for layers, fields in groups:
        if not fields and layers is None:
            continue
        for glob in layers or ["*"]:
            root.child(glob, **{"enabled": True, **fields})
    return root


def parse_tree(text: str) -> ConfigNode:
    root = ConfigNode()
    stack: list[ConfigNode] = [root]
    for lineno, raw in enumerate(text.splitlines(), 1):
        stripped = _strip_comment(raw)
        if not stripped.strip():
            continue
        indent = len(stripped) - len(stripped.lstrip(" "))
        if "\t" in stripped[: indent + 1] or indent % 2:
            raise ParseError("indentation must be multiples of two spaces", lineno)
        depth = indent // 2
        line = stripped.strip()
        if depth >= len(stack):
            raise ParseError("unexpected indentation", lineno)
        del stack[depth + 1 :]
        if "=" not in line and line.endswith(":"):
            segment = line[:-1].strip()
            if not segment:
                raise ParseError("empty node header", lineno)
            stack.append(stack[depth].child(segment))
            continue
        key, value = _split_kv(line, lineno)
        if key == "layers":
            raise ParseError("layers is an EasyConfig key; use node headers in tree files", lineno)
        stack[depth].fields[key] = _typed(key, value, lineno)
    return root


def is_easyconfig(text: str) -> bool:
    """Section headers or a flat key list mean EasyConfig; node headers mean a tree."""
    lines = [_strip_comment(l).strip() for l in text.splitlines()]
    lines = [l for l in lines if l]
    if any(l.startswith("[") for l in lines):
        return True
    return not any(l.endswith(":") and "=" not in l for l in lines)


def parse_config(text: str) -> ConfigNode:
    return parse_easyconfig(text) if is_easyconfig(text) else parse_tree(text)


def serialize(tree: ConfigNode) -> str:
    """Canonical tree-file text; ``parse_tree(serialize(t)) == t``."""
    lines: list[str] = []

    def emit(node: ConfigNode, depth: int):
        pad = "  " * depth
        for key in KEYS:
            if key in node.fields:
                lines.append(f"{pad}{key} = {format_value(key, node.fields[key])}")
        for c in node.children:
            lines.append(f"{pad}{c.segment}:")
            emit(c, depth + 1)

    emit(tree, 0)
    return "\n".join(lines) + ("\n" if lines else "")


def load_config(path) -> ConfigNode:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def _applies(pattern: str, layer: str) -> bool:
    if not pattern:
        return True
    if fnmatch.fnmatchcase(layer, pattern):
        return True
    parts = layer.split(".")
    return any(fnmatch.fnmatchcase(".".join(parts[:i]), pattern) for i in range(1, len(parts)))


@dataclass(frozen=True)
class LayerConfig:
    path: str
    enabled: bool
    targets: tuple[Target, ...]
    site: Site
    quant: QuantSpec
    selector: SelectorSpec | None
    error_model: ErrorModelSpec | None
    observers: tuple[ObserverSpec, ...]


def _materialize(graph: Graph, path: str, f: dict) -> LayerConfig:
    f = {**DEFAULTS, **f}
    weighted = graph.layer(path).kind.weighted
    want = {"activation": (Target.Activation,), "weight": (Target.Weight,), "both": (Target.Weight, Target.Activation)}[f["target"]]
    targets = tuple(t for t in want if t is Target.Activation or weighted)
    quant = f["method"]
    if f["scale"] is not None:
        quant = replace(quant, scale=f["scale"])
    selector = error_model = None
    enabled = bool(f["enabled"]) and bool(targets)
    if enabled:
        error_model = f.get("error_model")
        if error_model is None:
            raise ConfigError(f"{path}: injection enabled without error_model")
        mode = MODES[f["mode"]]
        if mode is SelectMode.Rate:
            if "ber" not in f:
                raise ConfigError(f"{path}: mode ber without a ber value")
            selector = SelectorSpec.rate(f["ber"], Sampling(f["sampling"]))
        elif mode is SelectMode.FixedCount:
            if "count" not in f:
                raise ConfigError(f"{path}: mode fixed_count without count")
            selector = SelectorSpec.fixed_count(f["count"])
        else:
            sites = tuple((off, bit) for p, off, bit in f.get("positions", ()) if p == path)
            selector = SelectorSpec.fixed_position(*sites)
            enabled = bool(sites)
        if error_model.kind.value == "bitflip_fixed" and error_model.bit >= quant.bits:
            raise ConfigError(f"{path}: bit {error_model.bit} outside {quant.bits}-bit word")
    return LayerConfig(path, enabled, targets, SITES[f["site"]], quant, selector, error_model, tuple(f["observers"]))


@dataclass
class ResolvedConfig:
    graph: Graph
    fields: dict[str, dict]
    layers: dict[str, LayerConfig] = field(init=False)

    def __post_init__(self):
        self.layers = {p: _materialize(self.graph, p, self.fields[p]) for p in self.graph.paths}

    def __getitem__(self, path: str) -> LayerConfig:
        return self.layers[path]

    @property
    def enabled(self) -> list[LayerConfig]:
        return [c for c in self.layers.values() if c.enabled]

    def with_fields(self, only_enabled: bool = True, **fields) -> "ResolvedConfig":
        """Copy with ``fields`` forced on every (enabled) layer, e.g. a sweep's ber."""
        for key in fields:
            if key not in KEYS:
                raise ConfigError(f"unknown key {key!r}")
        new = {
            p: ({**f, **fields} if (self.layers[p].enabled or not only_enabled) else dict(f))
            for p, f in self.fields.items()
        }
        return ResolvedConfig(self.graph, new)

    def with_mask(self, mask: SiteMask | None) -> "ResolvedConfig":
        out = ResolvedConfig(self.graph, self.fields)
        out.layers = {
            p: replace(c, selector=replace(c.selector, mask=mask)) if c.enabled else c
            for p, c in self.layers.items()
        }
        return out

    def observers(self, kinds: Iterable[ObserverKind] | None = None) -> dict[str, list[ObserverSpec]]:
        keep = None if kinds is None else set(kinds)
        out = {}
        for p, c in self.layers.items():
            specs = [o for o in c.observers if keep is None or o.kind in keep]
            if specs:
                out[p] = specs
        return out


def resolve(tree: ConfigNode, graph: Graph) -> ResolvedConfig:
    nodes = list(tree.walk())
    for pattern, _, node in nodes:
        if pattern and not any(_applies(pattern, p) for p in graph.paths):
            raise ConfigError(f"config path {pattern!r} matches no layer")
        for p, _, _ in node.fields.get("positions", ()):
            if p not in graph.paths:
                raise ConfigError(f"fault position path {p!r} is not a layer")
    fields: dict[str, dict] = {}
    for layer in graph.paths:
        best: dict[str, tuple[int, int]] = {}
        values: dict[str, Any] = {}
        for order, (pattern, depth, node) in enumerate(nodes):
            if not _applies(pattern, layer):
                continue
            for key, value in node.fields.items():
                rank = (depth, order)
                if key not in best or rank > best[key]:
                    best[key] = rank
                    values[key] = value
        fields[layer] = values
    return ResolvedConfig(graph, fields)


def _stat_hook(rec: ObservationRecord) -> Callback:
    def hook(t):
        if rec.kind is ObserverKind.MinMax:
            update_minmax(rec, t)
        else:
            dump_values(rec, t)
        return t
    return hook


def build_hooks(
    resolved: ResolvedConfig,
    rng: Rng,
    ranges: dict[str, DynamicRange] | None = None,
    records: Records | None = None,
) -> list[tuple[HookPoint, Callback]]:
    """Injector hooks for every enabled (layer, target).

    When ``records`` is given, single-pass observers (min/max, value dumps)
    are attached as well and write into it; divergence observers need a
    golden pass and are driven by :func:`nnfault.observe.dual_forward`.
    """
    ranges = ranges or {}
    hooks: list[tuple[HookPoint, Callback]] = []
    for cfg in resolved.enabled:
        for target in cfg.targets:
            if target is Target.Weight:
                point = HookPoint(cfg.path, Site.WeightPre)
                rng_range = ranges.get(weight_key(cfg.path))
                if rng_range is None and cfg.quant.method is QuantMethod.LAYERWISE:
                    w = resolved.graph.layer(cfg.path).weight.to_float()
                    rng_range = DynamicRange(float(w.min()), float(w.max()))
                batched = False
            else:
                point = HookPoint(cfg.path, cfg.site)
                key = cfg.path if cfg.site is Site.ActivationPost else input_key(cfg.path)
                rng_range = ranges.get(key)
                batched = True
            name = f"{cfg.path}:{target.value}"
            hooks.append((point, Injector(cfg.quant, cfg.selector, cfg.error_model, rng, range=rng_range, batched=batched, name=name)))
    if records is not None:
        for cfg in resolved.layers.values():
            for spec in cfg.observers:
                if spec.kind.divergence:
                    continue
                rec = records.setdefault(cfg.path, {}).setdefault(spec.kind, ObservationRecord.for_spec(cfg.path, spec))
                hooks.append((HookPoint(cfg.path, Site.ActivationPost), _stat_hook(rec)))
    return hooks
