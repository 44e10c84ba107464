import struct

import numpy as np
import pytest

from promptforge.errors import (
    BadMagic,
    DuplicateName,
    TruncatedPayload,
    VersionMismatch,
)
from promptforge.tensorfile import MAGIC, VERSION, load_tensors, save_tensors


def _roundtrip(tmp_path, tensors):
    p = tmp_path / "t.bin"
    save_tensors(p, tensors)
    return p, load_tensors(p)


def test_roundtrip_values_and_shapes(tmp_path):
    tensors = {
        "a": np.arange(12, dtype=np.float32).reshape(3, 4),
        "b.c": np.ones((2, 2, 2), dtype=np.float32),
        "scalarish": np.array([5.0], dtype=np.float32),
    }
    _, out = _roundtrip(tmp_path, tensors)
    assert list(out) == list(tensors)
    for k in tensors:
        assert out[k].dtype == np.float32
        np.testing.assert_array_equal(out[k], tensors[k])


def test_float64_input_is_cast(tmp_path):
    _, out = _roundtrip(tmp_path, {"x": np.array([[0.1, 0.2]], dtype=np.float64)})
    assert out["x"].dtype == np.float32
    np.testing.assert_array_equal(out["x"], np.array([[0.1, 0.2]], dtype=np.float32))


def test_rank_zero_roundtrip(tmp_path):
    _, out = _roundtrip(tmp_path, {"k": np.float32(3.5)})
    assert out["k"].shape == ()
    assert float(out["k"]) == 3.5


def test_byte_determinism(tmp_path):
    tensors = {"w": np.linspace(0, 1, 7, dtype=np.float32), "b": np.zeros(3)}
    p1 = tmp_path / "one.bin"
    p2 = tmp_path / "two.bin"
    save_tensors(p1, tensors)
    save_tensors(p2, tensors)
    assert p1.read_bytes() == p2.read_bytes()


def test_header_layout(tmp_path):
    p = tmp_path / "t.bin"
    save_tensors(p, {"ab": np.zeros((2, 3), dtype=np.float32)})
    raw = p.read_bytes()
    assert raw[:4] == MAGIC
    version, count = struct.unpack_from("<II", raw, 4)
    assert version == VERSION
    assert count == 1
    name_len = struct.unpack_from("<I", raw, 12)[0]
    assert name_len == 2
    assert raw[16:18] == b"ab"
    rank = struct.unpack_from("<I", raw, 18)[0]
    assert rank == 2
    assert struct.unpack_from("<II", raw, 22) == (2, 3)
    assert len(raw) == 30 + 2 * 3 * 4


def test_bad_magic(tmp_path):
    p = tmp_path / "t.bin"
    p.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(BadMagic):
        load_tensors(p)


def test_version_mismatch(tmp_path):
    p = tmp_path / "t.bin"
    p.write_bytes(MAGIC + struct.pack("<II", 99, 0))
    with pytest.raises(VersionMismatch):
        load_tensors(p)


def test_truncated_payload(tmp_path):
    p = tmp_path / "t.bin"
    save_tensors(p, {"x": np.zeros(10, dtype=np.float32)})
    raw = p.read_bytes()
    p.write_bytes(raw[:-8])
    with pytest.raises(TruncatedPayload):
        load_tensors(p)


def test_truncated_header(tmp_path):
    p = tmp_path / "t.bin"
    p.write_bytes(MAGIC + struct.pack("<I", VERSION))
    with pytest.raises(TruncatedPayload):
        load_tensors(p)


def test_duplicate_name_on_load(tmp_path):
    p = tmp_path / "t.bin"
    entry = struct.pack("<I", 1) + b"x" + struct.pack("<II", 1, 1)
    entry += struct.pack("<f", 0.0)
    p.write_bytes(MAGIC + struct.pack("<II", VERSION, 2) + entry + entry)
    with pytest.raises(DuplicateName):
        load_tensors(p)


def test_empty_mapping(tmp_path):
    p, out = _roundtrip(tmp_path, {})
    assert out == {}
    assert len(p.read_bytes()) == 12


def test_loaded_arrays_are_writable(tmp_path):
    _, out = _roundtrip(tmp_path, {"x": np.zeros(4, dtype=np.float32)})
    out["x"][0] = 1.0
    assert out["x"][0] == 1.0
