"""Binary grid container: bit-exact round trips and strict header checks."""
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxelfuse.errors import ContractError
from voxelfuse.vxf import MAGIC, MAX_RANK, read_vxf, write_vxf


def test_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arr = rng.normal(size=(3, 4, 5))
    p = tmp_path / "a.vxf"
    write_vxf(p, arr)
    back = read_vxf(p)
    assert back.shape == arr.shape
    assert back.dtype == np.float64
    # bit-exact, not just close
    assert np.array_equal(back.view(np.uint64), arr.view(np.uint64))


def test_round_trip_preserves_nan_and_inf_payloads(tmp_path):
    arr = np.array([np.nan, np.inf, -np.inf, -0.0, 1e-300])
    p = tmp_path / "weird.vxf"
    write_vxf(p, arr)
    back = read_vxf(p)
    assert np.array_equal(back.view(np.uint64), arr.view(np.uint64))


@settings(max_examples=30, deadline=None)
@given(
    shape=st.lists(st.integers(min_value=1, max_value=5), min_size=1, max_size=4),
    seed=st.integers(min_value=0, max_value=2**31),
)
def test_round_trip_any_small_shape(tmp_path_factory, shape, seed):
    arr = np.random.default_rng(seed).normal(size=tuple(shape))
    p = tmp_path_factory.mktemp("vxf") / "h.vxf"
    write_vxf(p, arr)
    assert np.array_equal(read_vxf(p), arr)


def test_header_layout_is_as_documented(tmp_path):
    arr = np.arange(6.0).reshape(2, 3)
    p = tmp_path / "layout.vxf"
    write_vxf(p, arr)
    raw = p.read_bytes()
    assert raw[:4] == MAGIC
    assert struct.unpack_from("<I", raw, 4)[0] == 2
    assert struct.unpack_from("<2Q", raw, 8) == (2, 3)
    assert raw[24:] == arr.tobytes(order="C")


def test_write_casts_to_f64_and_c_order(tmp_path):
    arr = np.asfortranarray(np.arange(12, dtype=np.float32).reshape(3, 4))
    p = tmp_path / "cast.vxf"
    write_vxf(p, arr)
    back = read_vxf(p)
    assert back.dtype == np.float64
    np.testing.assert_array_equal(back, arr.astype(np.float64))


def test_write_promotes_scalar_to_rank_one(tmp_path):
    # ascontiguousarray normalizes 0-d input to shape (1,), so a bare
    # scalar round-trips as a one-element vector rather than erroring
    p = tmp_path / "r0.vxf"
    write_vxf(p, np.float64(3.0))
    back = read_vxf(p)
    assert back.shape == (1,) and back[0] == 3.0


def test_write_rejects_excess_rank(tmp_path):
    arr = np.zeros((1,) * (MAX_RANK + 1))
    with pytest.raises(ContractError, match="rank"):
        write_vxf(tmp_path / "deep.vxf", arr)


def test_read_rejects_bad_magic(tmp_path):
    p = tmp_path / "bad.vxf"
    p.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(ContractError, match="magic"):
        read_vxf(p)


def test_read_rejects_short_file(tmp_path):
    p = tmp_path / "tiny.vxf"
    p.write_bytes(b"VX")
    with pytest.raises(ContractError, match="magic"):
        read_vxf(p)


def test_read_rejects_truncated_header(tmp_path):
    p = tmp_path / "trunc.vxf"
    # claims rank 3 but provides only one dim
    p.write_bytes(MAGIC + struct.pack("<I", 3) + struct.pack("<Q", 4))
    with pytest.raises(ContractError, match="truncated"):
        read_vxf(p)


def test_read_rejects_payload_size_mismatch(tmp_path):
    p = tmp_path / "short.vxf"
    write_vxf(p, np.zeros((2, 2)))
    raw = p.read_bytes()
    p.write_bytes(raw[:-8])  # drop one element
    with pytest.raises(ContractError, match="payload size"):
        read_vxf(p)
    p.write_bytes(raw + b"\x00" * 8)  # extra trailing bytes
    with pytest.raises(ContractError, match="payload size"):
        read_vxf(p)


def test_read_rejects_unsupported_rank(tmp_path):
    p = tmp_path / "rank.vxf"
    p.write_bytes(MAGIC + struct.pack("<I", MAX_RANK + 1) + b"\x00" * 8 * (MAX_RANK + 1))
    with pytest.raises(ContractError, match="rank"):
        read_vxf(p)
    p.write_bytes(MAGIC + struct.pack("<I", 0))
    with pytest.raises(ContractError, match="rank"):
        read_vxf(p)


def test_read_returns_writable_copy(tmp_path):
    p = tmp_path / "copy.vxf"
    write_vxf(p, np.ones((2, 2)))
    back = read_vxf(p)
    back[0, 0] = 7.0  # must not raise: reader hands back an owned buffer
    assert back[0, 0] == 7.0
