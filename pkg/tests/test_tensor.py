import numpy as np
import pytest
from hypothesis import given, strategies as st

from nnfault.tensor import DType, Tensor, flat_index, get_bits, int_dtype_for, set_bits


def test_word_bits():
    assert [d.word_bits for d in DType] == [32, 16, 32, 16, 8]


@pytest.mark.parametrize("shape,coords,expected", [((3, 4), (1, 2), 6), ((2, 3, 4), (1, 0, 3), 15), ((5,), (4,), 4)])
def test_flat_index_row_major(shape, coords, expected):
    t = Tensor(np.zeros(shape, np.float32))
    assert flat_index(t, coords) == expected
    assert np.ravel_multi_index(coords, shape) == expected


def test_flat_index_bounds():
    t = Tensor(np.zeros((2, 2), np.float32))
    with pytest.raises(IndexError):
        flat_index(t, (2, 0))
    with pytest.raises(IndexError):
        flat_index(t, (0,))


def test_f32_bits_match_struct():
    import struct

    t = Tensor(np.array([1.0, -2.5], np.float32))
    assert get_bits(t, 0) == struct.unpack("<I", struct.pack("<f", 1.0))[0]
    assert get_bits(t, 1) == struct.unpack("<I", struct.pack("<f", -2.5))[0]


def test_f16_exponent_msb_flip_is_inf():
    t = Tensor.from_float([1.0], DType.F16)
    assert get_bits(t, 0) == 0x3C00
    set_bits(t, 0, get_bits(t, 0) ^ (1 << 14))
    assert t.to_float()[0] == np.inf


def test_i16_msb_flip():
    t = Tensor(np.zeros(1, np.int16), DType.I16)
    set_bits(t, 0, 1 << 15)
    assert t.data[0] == -32768


def test_narrow_code_sign_extension():
    t = Tensor(np.array([0], np.int16), DType.I16, bits=14)
    set_bits(t, 0, 1 << 13)
    assert t.data[0] == -(1 << 13)
    with pytest.raises(ValueError):
        set_bits(t, 0, 1 << 14)


def test_set_bits_rejects_wide_word_and_offset():
    t = Tensor(np.zeros(2, np.int8), DType.I8)
    with pytest.raises(ValueError):
        set_bits(t, 0, 256)
    with pytest.raises(IndexError):
        get_bits(t, 2)


def test_empty_tensor_rejected():
    with pytest.raises(ValueError):
        Tensor(np.zeros(0, np.float32))


def test_int_dtype_for():
    assert int_dtype_for(8) is DType.I8
    assert int_dtype_for(14) is DType.I16
    assert int_dtype_for(20) is DType.I32
    with pytest.raises(ValueError):
        int_dtype_for(33)


def test_f16_round_to_nearest_even():
    # 1 + 2^-11 is exactly halfway between two f16 values; ties go to even.
    t = Tensor.from_float([1.0 + 2.0**-11, 1.0 + 3 * 2.0**-11], DType.F16)
    assert get_bits(t, 0) == 0x3C00
    assert get_bits(t, 1) == 0x3C02


@given(st.integers(0, 0xFFFF), st.integers(0, 15))
def test_f16_flip_involution(word, bit):
    t = Tensor(np.array([word], np.uint16), DType.F16)
    before = t.copy()
    set_bits(t, 0, get_bits(t, 0) ^ (1 << bit))
    assert not t.bit_equal(before)
    set_bits(t, 0, get_bits(t, 0) ^ (1 << bit))
    assert t.bit_equal(before)


def test_flat_index_bijection_brute_force():
    t = Tensor(np.zeros((4, 4, 4), np.float32))
    order = [(a, b, c) for a in range(4) for b in range(4) for c in range(4)]
    assert [flat_index(t, co) for co in order] == list(range(64))
    assert flat_index(t, (1, 2, 3)) == 27
    assert flat_index(Tensor(np.zeros((2, 3), np.float32)), (0, 0)) == 0


def test_bit_pattern_examples():
    assert get_bits(Tensor(np.array([1.0], np.float32)), 0) == 0x3F800000
    assert get_bits(Tensor(np.array([-4], np.int16), DType.I16), 0) == 0xFFFC
    t = Tensor(np.zeros(1, np.float32))
    set_bits(t, 0, 0x3F800000)
    assert t.data[0] == 1.0
    h = Tensor.from_float([0.0], DType.F16)
    set_bits(h, 0, 0x7C00)
    assert h.to_float()[0] == np.inf


def test_nan_patterns_preserved():
    h = Tensor(np.array([0x7E01], np.uint16), DType.F16)
    assert np.isnan(h.to_float()[0]) and get_bits(h, 0) == 0x7E01


@pytest.mark.parametrize("dtype,bits", [(DType.F32, 32), (DType.F16, 16), (DType.I32, 32), (DType.I16, 16), (DType.I16, 14), (DType.I8, 8)])
def test_get_set_identity_every_element(dtype, bits):
    rng = np.random.default_rng(bits)
    raw = rng.integers(0, 1 << 16, size=20 * dtype.word_bits // 8, dtype=np.uint16).view(dtype.unsigned)[:20]
    t = Tensor(raw.view(dtype.storage), dtype)
    if bits != dtype.word_bits:
        t = Tensor(np.clip(t.data, -(1 << (bits - 1)), (1 << (bits - 1)) - 1), dtype, bits)
    before = t.copy()
    for i in range(t.size):
        set_bits(t, i, get_bits(t, i))
    assert t.bit_equal(before)
