import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cais.validation import ShapeError
from cais.tensor_io import (TensorFormatError, avg_pool2, read_pfm, read_tensor, write_pfm,
                            write_tensor)


def test_roundtrip_small(tmp_path):
    t = np.arange(6, dtype=np.float32).reshape(2, 3)
    path = tmp_path / "t.cvt1"
    write_tensor(path, t)
    back = read_tensor(path)
    assert back.dtype == np.float32
    np.testing.assert_array_equal(back, t)


def test_scalar_file_is_16_bytes(tmp_path):
    path = tmp_path / "s.cvt1"
    write_tensor(path, np.array([3.5], dtype=np.float32))
    raw = path.read_bytes()
    assert len(raw) == 16
    assert raw[:4] == b"CVT1"
    assert struct.unpack("<I", raw[4:8]) == (1,)
    assert struct.unpack("<I", raw[8:12]) == (1,)
    assert struct.unpack("<f", raw[12:16]) == (3.5,)


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.cvt1"
    path.write_bytes(b"XXXX" + b"\x00" * 12)
    with pytest.raises(TensorFormatError, match="offset 0"):
        read_tensor(path)


def test_truncated_payload_names_offset(tmp_path):
    path = tmp_path / "trunc.cvt1"
    write_tensor(path, np.ones((2, 2), np.float32))
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(TensorFormatError, match="offset 16"):
        read_tensor(path)


def test_rejects_non_finite(tmp_path):
    with pytest.raises(ValueError):
        write_tensor(tmp_path / "nan.cvt1", np.array([np.nan], np.float32))


finite32 = st.floats(allow_nan=False, allow_infinity=False, width=32)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 5), st.integers(1, 3)),
              elements=finite32))
def test_cvt1_rewrite_is_byte_identical(tmp_path_factory, t):
    d = tmp_path_factory.mktemp("rt")
    a, b = d / "a.cvt1", d / "b.cvt1"
    write_tensor(a, t)
    write_tensor(b, read_tensor(a))
    assert a.read_bytes() == b.read_bytes()
    np.testing.assert_array_equal(read_tensor(a), t)


def test_pfm_single_value(tmp_path):
    path = tmp_path / "one.pfm"
    write_pfm(path, np.array([[7.0]], np.float32))
    assert read_pfm(path)[0, 0] == 7.0


def test_pfm_is_bottom_up(tmp_path):
    m = np.array([[1, 2], [3, 4]], np.float32)
    path = tmp_path / "m.pfm"
    write_pfm(path, m)
    raw = path.read_bytes()
    assert raw.startswith(b"Pf\n2 2\n-1.0\n")
    last_row = np.frombuffer(raw[-8:], dtype="<f4")
    np.testing.assert_array_equal(last_row, m[0])
    np.testing.assert_array_equal(read_pfm(path), m)


def test_pfm_color_rejected(tmp_path):
    path = tmp_path / "c.pfm"
    path.write_bytes(b"PF\n1 1\n-1.0\n" + b"\x00" * 12)
    with pytest.raises(TensorFormatError, match="color"):
        read_pfm(path)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=finite32))
def test_pfm_rewrite_is_byte_identical(tmp_path_factory, m):
    d = tmp_path_factory.mktemp("pfm")
    a, b = d / "a.pfm", d / "b.pfm"
    write_pfm(a, m)
    write_pfm(b, read_pfm(a))
    assert a.read_bytes() == b.read_bytes()
    np.testing.assert_array_equal(read_pfm(a), m)


@pytest.mark.parametrize("img, expected", [
    ([[1, 1], [1, 1]], [[1]]),
    ([[0, 2], [4, 6]], [[3]]),
    (np.arange(16).reshape(4, 4), [[2.5, 4.5], [10.5, 12.5]]),
])
def test_avg_pool2_examples(img, expected):
    np.testing.assert_array_equal(avg_pool2(np.asarray(img, np.float32)), expected)


def test_avg_pool2_odd_extent():
    with pytest.raises(ShapeError):
        avg_pool2(np.zeros((3, 4), np.float32))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4)),
              elements=st.floats(-100, 100)))
def test_avg_pool2_preserves_channel_mean(half):
    rng = np.random.default_rng(half.size)
    f = np.repeat(np.repeat(half, 2, axis=1), 2, axis=2) + rng.normal(size=(1,) + tuple(
        2 * n for n in half.shape[1:]))
    np.testing.assert_allclose(avg_pool2(f).mean(axis=(1, 2)), f.mean(axis=(1, 2)), atol=1e-9)
