"""Dense row-major tensors with bit-level element access.

Storage is a numpy array. ``F16`` elements are kept as raw ``uint16``
patterns, integer dtypes as signed two's-complement arrays. Integer tensors
may carry a logical width narrower than their storage word (a 14-bit
fixed-point code lives in an ``int16`` slot); bit access then works on the
logical width and writes are sign-extended into the slot.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class DType(enum.Enum):
    F32 = "f32"
    F16 = "f16"
    I32 = "i32"
    I16 = "i16"
    I8 = "i8"

    @property
    def word_bits(self) -> int:
        return _WORD_BITS[self]

    @property
    def storage(self) -> np.dtype:
        return np.dtype(_STORAGE[self])

    @property
    def unsigned(self) -> np.dtype:
        return np.dtype(f"uint{self.word_bits}")

    @property
    def is_float(self) -> bool:
        return self in (DType.F32, DType.F16)


_WORD_BITS = {DType.F32: 32, DType.F16: 16, DType.I32: 32, DType.I16: 16, DType.I8: 8}
_STORAGE = {
    DType.F32: np.float32,
    DType.F16: np.uint16,
    DType.I32: np.int32,
    DType.I16: np.int16,
    DType.I8: np.int8,
}


def int_dtype_for(bits: int) -> DType:
    """Smallest integer dtype holding a ``bits``-wide two's-complement code."""
    if bits <= 8:
        return DType.I8
    if bits <= 16:
        return DType.I16
    if bits <= 32:
        return DType.I32
    raise ValueError(f"no integer dtype holds {bits} bits")


@dataclass(eq=False)
class Tensor:
    data: np.ndarray
    dtype: DType = DType.F32
    bits: int | None = None

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=self.dtype.storage)
        if self.data.ndim == 0:
            self.data = self.data.reshape(1)
        if self.data.size == 0:
            raise ValueError("tensor must have at least one element")
        if self.bits is None:
            self.bits = self.dtype.word_bits
        if self.dtype.is_float and self.bits != self.dtype.word_bits:
            raise ValueError("float tensors use their full word width")
        if not 1 <= self.bits <= self.dtype.word_bits:
            raise ValueError(f"logical width {self.bits} does not fit {self.dtype.value}")

    @classmethod
    def from_float(cls, values, dtype: DType = DType.F32) -> "Tensor":
        """Build a float tensor; F16 narrows with round-to-nearest-even."""
        arr = np.asarray(values, dtype=np.float32)
        if dtype is DType.F32:
            return cls(arr, DType.F32)
        if dtype is DType.F16:
            return cls(arr.astype(np.float16).view(np.uint16), DType.F16)
        raise ValueError(f"{dtype} is not a float dtype")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), self.dtype, self.bits)

    def to_float(self) -> np.ndarray:
        """Values as a float32 array (a view for F32 tensors)."""
        if self.dtype is DType.F32:
            return self.data
        if self.dtype is DType.F16:
            return self.data.view(np.float16).astype(np.float32)
        return self.data.astype(np.float32)

    def raw(self) -> np.ndarray:
        """Flat unsigned view of the stored words, sharing memory."""
        return self.data.reshape(-1).view(self.dtype.unsigned)

    def patterns(self) -> np.ndarray:
        """Flat logical bit patterns as uint64, masked to ``bits``."""
        return self.raw().astype(np.uint64) & np.uint64((1 << self.bits) - 1)

    def store_patterns(self, offsets: np.ndarray, words: np.ndarray) -> None:
        """Write logical patterns at flat offsets, sign-extending integer codes."""
        words = np.asarray(words, dtype=np.uint64)
        if self.bits < self.dtype.word_bits:
            sign = np.uint64(1 << (self.bits - 1))
            ext = np.uint64(((1 << self.dtype.word_bits) - 1) ^ ((1 << self.bits) - 1))
            words = np.where(words & sign, words | ext, words)
        self.raw()[offsets] = words.astype(self.dtype.unsigned)

    def bit_equal(self, other: "Tensor") -> bool:
        return (
            self.dtype is other.dtype
            and self.shape == other.shape
            and np.array_equal(self.raw(), other.raw())
        )

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.value}, bits={self.bits})"


def flat_index(tensor: Tensor, coords: Sequence[int]) -> int:
    shape = tensor.shape
    if len(coords) != len(shape):
        raise IndexError(f"expected {len(shape)} coordinates, got {len(coords)}")
    offset = 0
    for c, extent in zip(coords, shape):
        if not 0 <= c < extent:
            raise IndexError(f"coordinate {c} out of range for extent {extent}")
        offset = offset * extent + c
    return offset


def _check_offset(tensor: Tensor, offset: int) -> None:
    if not 0 <= offset < tensor.size:
        raise IndexError(f"offset {offset} out of range for {tensor.size} elements")


def get_bits(tensor: Tensor, offset: int) -> int:
    _check_offset(tensor, offset)
    return int(tensor.raw()[offset]) & ((1 << tensor.bits) - 1)


def set_bits(tensor: Tensor, offset: int, word: int) -> None:
    _check_offset(tensor, offset)
    if not 0 <= word < (1 << tensor.bits):
        raise ValueError(f"word {word:#x} exceeds {tensor.bits} bits")
    tensor.store_patterns(np.array([offset]), np.array([word], dtype=np.uint64))
