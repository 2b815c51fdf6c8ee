"""Fault selectors, error models and the injector that composes them.

Rate selectors work over bit slots: a tensor of ``E`` elements exposes
``E * word_bits`` slots to bit-level error models and ``E`` slots to
value-level ones, so a rate is a per-bit (or per-element) error rate.
"""

from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .quant import DynamicRange, QuantMethod, QuantSpec, dequantize, quantize
from .tensor import Tensor

_CHUNK = 1 << 20


class Target(enum.Enum):
    Weight = "weight"
    Activation = "activation"


@dataclass(frozen=True)
class Rng:
    """Seed for counter-based (Philox) streams keyed by trial and stream name.

    Streams for different ``(trial, name)`` pairs are independent and do not
    depend on the order in which they are created.
    """

    seed: int
    trial: int = 0

    def key(self, name: str = "") -> np.ndarray:
        digest = hashlib.blake2b(f"{self.seed}/{self.trial}/{name}".encode(), digest_size=16).digest()
        return np.frombuffer(digest, dtype="<u8").copy()

    def generator(self, name: str = "") -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=self.key(name)))

    def for_trial(self, trial: int) -> "Rng":
        return Rng(self.seed, trial)


def _as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, Rng):
        return rng.generator()
    raise TypeError(f"expected Rng or numpy Generator, got {type(rng).__name__}")


def expected_count(n_bits: int, ber: float) -> int:
    """Nearest-integer fault count, ties rounded away from zero."""
    if n_bits < 0:
        raise ValueError("n_bits must be non-negative")
    return int(math.floor(n_bits * ber + 0.5))


def poisson_count(n_bits: int, ber: float, rng) -> int:
    lam = n_bits * ber
    if not math.isfinite(lam):
        raise ValueError(f"Poisson mean {lam} is not finite")
    if lam <= 0:
        return 0
    return int(_as_generator(rng).poisson(lam))


class Sampling(enum.Enum):
    Rounded = "rounded"
    Poisson = "poisson"
    PerBitBernoulli = "bernoulli"


class SelectMode(enum.Enum):
    FixedPosition = "fixed_position"
    FixedCount = "fixed_count"
    Rate = "ber"


@dataclass(frozen=True)
class SiteMask:
    """Restricts candidate elements of one sample.

    Axis 0 is the channel axis (output channel for conv weights, feature
    channel for activations); pixels index the last two axes.
    """

    channels: frozenset[int] | None = None
    pixels: frozenset[tuple[int, int]] | None = None
    array: np.ndarray | None = field(default=None, compare=False)

    def allowed(self, shape: Sequence[int]) -> np.ndarray:
        ok = np.ones(shape, dtype=bool)
        if self.channels is not None:
            bad = [c for c in self.channels if not 0 <= c < shape[0]]
            if bad:
                raise ConfigError(f"mask channels {bad} outside 0..{shape[0] - 1}")
            sel = np.zeros(shape[0], dtype=bool)
            sel[list(self.channels)] = True
            ok &= sel.reshape((-1,) + (1,) * (len(shape) - 1))
        if self.pixels is not None:
            if len(shape) < 2:
                raise ConfigError(f"pixel mask needs a spatial tensor, got shape {tuple(shape)}")
            plane = np.zeros(shape[-2:], dtype=bool)
            for h, w in self.pixels:
                if not (0 <= h < shape[-2] and 0 <= w < shape[-1]):
                    raise ConfigError(f"mask pixel {(h, w)} outside {tuple(shape[-2:])}")
                plane[h, w] = True
            ok &= plane
        if self.array is not None:
            ok &= np.broadcast_to(np.asarray(self.array, dtype=bool), shape)
        return ok

    def candidates(self, shape: Sequence[int]) -> np.ndarray:
        return np.flatnonzero(self.allowed(shape))


@dataclass(frozen=True)
class SelectorSpec:
    mode: SelectMode
    ber: float = 0.0
    sampling: Sampling = Sampling.Poisson
    count: int = 0
    positions: tuple[tuple[int, int | None], ...] = ()
    mask: SiteMask | None = None

    def __post_init__(self):
        if not 0.0 <= self.ber <= 1.0:
            raise ConfigError(f"bit error rate {self.ber} outside [0, 1]")
        if self.count < 0:
            raise ConfigError(f"negative fault count {self.count}")

    @classmethod
    def rate(cls, ber: float, sampling: Sampling = Sampling.Poisson, mask: SiteMask | None = None) -> "SelectorSpec":
        return cls(SelectMode.Rate, ber=ber, sampling=sampling, mask=mask)

    @classmethod
    def fixed_count(cls, k: int, mask: SiteMask | None = None) -> "SelectorSpec":
        return cls(SelectMode.FixedCount, count=k, mask=mask)

    @classmethod
    def fixed_position(cls, *sites: tuple[int, int | None]) -> "SelectorSpec":
        return cls(SelectMode.FixedPosition, positions=tuple(sites))


@dataclass(frozen=True)
class FaultSite:
    layer_path: str
    target: Target
    element_offset: int
    bit_index: int | None = None


def _select(selector: SelectorSpec, shape: Sequence[int], word_bits: int, gen: np.random.Generator, batch: int = 1):
    """Flat offsets into the ``(batch, *shape)`` tensor and per-site bit indices (-1 = unset)."""
    per = int(np.prod(shape))
    cand = selector.mask.candidates(shape) if selector.mask is not None else None
    m = per if cand is None else len(cand)
    empty = np.empty(0, np.int64)

    if selector.mode is SelectMode.FixedPosition:
        offs, bits = [], []
        allowed = None if selector.mask is None else selector.mask.allowed(shape).reshape(-1)
        for off, bit in selector.positions:
            if not 0 <= off < per:
                raise ConfigError(f"fixed position {off} outside {per} elements")
            if bit is not None and not 0 <= bit < word_bits:
                raise ConfigError(f"fixed bit {bit} outside word of {word_bits} bits")
            if allowed is not None and not allowed[off]:
                continue
            offs.append(off)
            bits.append(-1 if bit is None else bit)
        if not offs:
            return empty, empty
        base = np.arange(batch, dtype=np.int64)[:, None] * per
        return (base + np.array(offs)).reshape(-1), np.tile(np.array(bits, np.int64), batch)

    if selector.mode is SelectMode.FixedCount:
        k, space = selector.count, m * word_bits
        if k > space:
            raise ConfigError(f"fault count {k} exceeds {space} candidate sites")
        if k == 0 or batch == 0:
            return empty, empty
        if k == 1:
            slots = gen.integers(0, space, size=(batch, 1))
        else:
            slots = np.stack([np.sort(gen.choice(space, size=k, replace=False)) for _ in range(batch)])
        elems, bits = slots // word_bits, slots % word_bits
        local = elems if cand is None else cand[elems]
        offs = local + np.arange(batch, dtype=np.int64)[:, None] * per
        return offs.reshape(-1).astype(np.int64), bits.reshape(-1).astype(np.int64)

    space = batch * m * word_bits
    if selector.ber == 0.0 or space == 0:
        return empty, empty
    if selector.sampling is Sampling.Rounded:
        k = expected_count(space, selector.ber)
        slots = np.sort(gen.choice(space, size=k, replace=False)) if k else empty
    elif selector.sampling is Sampling.Poisson:
        k = poisson_count(space, selector.ber, gen)
        slots = np.unique(gen.integers(0, space, size=k)) if k else empty
    else:
        hits = []
        for start in range(0, space, _CHUNK):
            n = min(_CHUNK, space - start)
            hits.append(np.flatnonzero(gen.random(n) < selector.ber) + start)
        slots = np.concatenate(hits)
    slots = slots.astype(np.int64)
    elems, bits = slots // word_bits, slots % word_bits
    sample, j = elems // m, elems % m
    local = j if cand is None else cand[j]
    return sample * per + local, bits


def select_sites(
    selector: SelectorSpec,
    tensor_shape: Sequence[int],
    word_bits: int,
    rng,
    *,
    batch: int = 1,
    layer_path: str = "",
    target: Target = Target.Activation,
) -> list[FaultSite]:
    """Choose fault sites in a ``(batch, *tensor_shape)`` tensor.

    Fixed positions and fixed counts apply to every sample; rate selection
    covers all ``batch * elements * word_bits`` slots at once. Bit-level error
    models pass the word width, value-level ones ``word_bits=1``.
    """
    offs, bits = _select(selector, tuple(tensor_shape), word_bits, _as_generator(rng), batch)
    return [
        FaultSite(layer_path, target, int(o), None if b < 0 or word_bits == 1 else int(b))
        for o, b in zip(offs, bits)
    ]


class ErrorKind(enum.Enum):
    BitFlipRandom = "bitflip_random"
    BitFlipFixed = "bitflip_fixed"
    StuckAtZero = "stuck0"
    FixedValue = "value"
    UniformRandom = "uniform"
    GaussianPerturb = "gauss"


@dataclass(frozen=True)
class ErrorModelSpec:
    kind: ErrorKind
    bit: int = 0
    value: float = 0.0
    lo: float = 0.0
    hi: float = 1.0
    sigma: float = 1.0

    def __post_init__(self):
        if self.kind is ErrorKind.BitFlipFixed and self.bit < 0:
            raise ConfigError(f"negative bit index {self.bit}")
        if self.kind is ErrorKind.UniformRandom and not self.lo < self.hi:
            raise ConfigError(f"uniform bounds need lo < hi, got {self.lo}, {self.hi}")
        if self.kind is ErrorKind.GaussianPerturb and not self.sigma > 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")

    @property
    def bit_level(self) -> bool:
        return self.kind in (ErrorKind.BitFlipRandom, ErrorKind.BitFlipFixed)

    def slot_bits(self, word_bits: int) -> int:
        """Bits per element exposed to selectors (a fixed bit leaves one choice)."""
        return word_bits if self.kind is ErrorKind.BitFlipRandom else 1

    @classmethod
    def parse(cls, text: str) -> "ErrorModelSpec":
        name, _, arg = text.strip().partition(":")
        try:
            kind = ErrorKind(name)
        except ValueError:
            raise ConfigError(f"unknown error model {name!r}") from None
        try:
            if kind is ErrorKind.BitFlipFixed:
                return cls(kind, bit=int(arg))
            if kind is ErrorKind.FixedValue:
                return cls(kind, value=float(arg))
            if kind is ErrorKind.UniformRandom:
                lo, hi = arg.split(",")
                return cls(kind, lo=float(lo), hi=float(hi))
            if kind is ErrorKind.GaussianPerturb:
                return cls(kind, sigma=float(arg))
        except ValueError:
            raise ConfigError(f"malformed error model {text!r}") from None
        if arg:
            raise ConfigError(f"error model {name!r} takes no argument")
        return cls(kind)

    def text(self) -> str:
        k = self.kind
        if k is ErrorKind.BitFlipFixed:
            return f"{k.value}:{self.bit}"
        if k is ErrorKind.FixedValue:
            return f"{k.value}:{self.value!r}"
        if k is ErrorKind.UniformRandom:
            return f"{k.value}:{self.lo!r},{self.hi!r}"
        if k is ErrorKind.GaussianPerturb:
            return f"{k.value}:{self.sigma!r}"
        return k.value


def _apply(model: ErrorModelSpec, tensor: Tensor, offsets: np.ndarray, bits: np.ndarray, gen: np.random.Generator) -> int:
    if len(offsets) == 0:
        return 0
    width = tensor.bits
    if model.kind is ErrorKind.GaussianPerturb and not tensor.dtype.is_float:
        raise ConfigError("Gaussian perturbation needs a float target")
    uoff, inverse = np.unique(offsets, return_inverse=True)
    before = tensor.patterns()[uoff]

    if model.bit_level:
        if model.kind is ErrorKind.BitFlipFixed:
            if model.bit >= width:
                raise ConfigError(f"bit {model.bit} outside {width}-bit word")
            flip = np.full(len(offsets), model.bit, np.int64)
        else:
            flip = np.asarray(bits, np.int64).copy()
            unset = flip < 0
            if unset.any():
                flip[unset] = gen.integers(0, width, size=int(unset.sum()))
        masks = np.zeros(len(uoff), np.uint64)
        np.bitwise_xor.at(masks, inverse, np.left_shift(np.uint64(1), flip.astype(np.uint64)))
        after = before ^ masks
    else:
        n = len(uoff)
        if tensor.dtype.is_float:
            cur = tensor.to_float().reshape(-1)[uoff]
            if model.kind is ErrorKind.StuckAtZero:
                new = np.zeros(n, np.float32)
            elif model.kind is ErrorKind.FixedValue:
                new = np.full(n, model.value, np.float32)
            elif model.kind is ErrorKind.UniformRandom:
                new = gen.uniform(model.lo, model.hi, size=n).astype(np.float32)
            else:
                new = (cur.astype(np.float64) + gen.normal(0.0, model.sigma, size=n)).astype(np.float32)
            after = Tensor.from_float(new, tensor.dtype).patterns()
        else:
            lo, hi = -(1 << (width - 1)), (1 << (width - 1)) - 1
            if model.kind is ErrorKind.StuckAtZero:
                codes = np.zeros(n, np.int64)
            elif model.kind is ErrorKind.FixedValue:
                codes = np.full(n, int(np.clip(round(model.value), lo, hi)), np.int64)
            else:
                a = max(lo, math.ceil(model.lo))
                b = min(hi + 1, math.ceil(model.hi))
                if a >= b:
                    raise ConfigError(f"uniform range [{model.lo}, {model.hi}) holds no {width}-bit code")
                codes = gen.integers(a, b, size=n)
            after = codes.astype(np.uint64) & np.uint64((1 << width) - 1)
    tensor.store_patterns(uoff, after)
    return int(np.count_nonzero(after != before))


def apply_error(model: ErrorModelSpec, tensor: Tensor, sites: Sequence[FaultSite], rng) -> int:
    """Corrupt ``tensor`` in place at ``sites``; returns the number of changed elements."""
    offsets = np.array([s.element_offset for s in sites], dtype=np.int64)
    bits = np.array([-1 if s.bit_index is None else s.bit_index for s in sites], dtype=np.int64)
    if len(offsets) and (offsets.min() < 0 or offsets.max() >= tensor.size):
        raise IndexError("fault site outside tensor")
    return _apply(model, tensor, offsets, bits, _as_generator(rng))


class Injector:
    """Hook callback running select -> [quantize] -> corrupt -> [dequantize].

    Only elements whose stored word actually changed are written back, so
    every other element of the output is bit-identical to the input.
    ``batched`` tensors carry a leading sample axis; fixed positions and
    counts then apply per sample.
    """

    def __init__(
        self,
        quant: QuantSpec,
        selector: SelectorSpec,
        model: ErrorModelSpec,
        rng,
        *,
        range: DynamicRange | None = None,
        batched: bool = True,
        name: str = "",
    ):
        if quant.method is QuantMethod.LAYERWISE and range is None:
            raise ConfigError(f"{name or 'injector'}: layerwise quantization needs a calibrated range")
        if model.kind is ErrorKind.GaussianPerturb and quant.method in (QuantMethod.FIXED, QuantMethod.LAYERWISE):
            raise ConfigError("Gaussian perturbation needs a float target, not integer codes")
        if model.kind is ErrorKind.BitFlipFixed and model.bit >= quant.bits:
            raise ConfigError(f"bit {model.bit} outside {quant.bits}-bit word")
        self.quant, self.selector, self.model, self.range = quant, selector, model, range
        self.batched = batched
        self.name = name
        self.gen = rng.generator(name) if isinstance(rng, Rng) else _as_generator(rng)
        self.word_bits = model.slot_bits(quant.bits)
        self.calls = 0
        self.sites = 0
        self.changed = 0

    def __call__(self, t: Tensor) -> Tensor:
        self.calls += 1
        shape, batch = (t.shape[1:], t.shape[0]) if self.batched else (t.shape, 1)
        offsets, bits = _select(self.selector, shape, self.word_bits, self.gen, batch)
        if self.model.kind is ErrorKind.BitFlipFixed:
            bits = np.full(len(offsets), self.model.bit, np.int64)
        self.sites += len(offsets)
        if len(offsets) == 0:
            return t
        out = t.copy()
        if self.quant.method is QuantMethod.NONE:
            self.changed += _apply(self.model, out, offsets, bits, self.gen)
            return out
        uoff, inverse = np.unique(offsets, return_inverse=True)
        flat = out.data.reshape(-1)
        codes = quantize(Tensor(flat[uoff]), self.quant, self.range)
        before = codes.patterns()
        _apply(self.model, codes, inverse.astype(np.int64), bits, self.gen)
        hit = codes.patterns() != before
        flat[uoff[hit]] = dequantize(codes, self.quant, self.range).data[hit]
        self.changed += int(hit.sum())
        return out


def make_injector(quant: QuantSpec, selector: SelectorSpec, model: ErrorModelSpec, rng, **kwargs) -> Injector:
    return Injector(quant, selector, model, rng, **kwargs)
