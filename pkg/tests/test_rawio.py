import struct

import numpy as np
import pytest

from diffma.rawio import MAGIC, read_tensor, write_tensor


@pytest.mark.parametrize("dtype", ["<f4", "<f8", "u1", "<i8", ">f4", ">f8"])
def test_roundtrip(tmp_path, dtype):
    a = (np.arange(24).reshape(2, 3, 4) % 7).astype(dtype)
    write_tensor(tmp_path / "t.bin", a)
    b = read_tensor(tmp_path / "t.bin")
    assert b.shape == a.shape and np.array_equal(a, b)


def test_header_layout(tmp_path):
    write_tensor(tmp_path / "t.bin", np.ones((2, 5), dtype=np.float32))
    raw = (tmp_path / "t.bin").read_bytes()
    assert raw[:4] == MAGIC
    assert struct.unpack_from("<BBH", raw, 4) == (1, 2, 0)
    assert struct.unpack_from("<2I", raw, 8) == (2, 5)
    assert len(raw) == 16 + 10 * 4
    assert struct.unpack_from("<f", raw, 16)[0] == 1.0


def test_scalar_and_empty(tmp_path):
    write_tensor(tmp_path / "s.bin", np.float64(3.5))
    assert read_tensor(tmp_path / "s.bin") == 3.5
    write_tensor(tmp_path / "e.bin", np.zeros((0, 3), np.float32))
    assert read_tensor(tmp_path / "e.bin").shape == (0, 3)


def test_rejects_corrupt(tmp_path):
    p = tmp_path / "t.bin"
    write_tensor(p, np.ones(4, np.float32))
    p.write_bytes(p.read_bytes()[:-2])
    with pytest.raises(ValueError, match="payload"):
        read_tensor(p)
    p.write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(ValueError, match="magic"):
        read_tensor(p)
    with pytest.raises(ValueError):
        write_tensor(p, np.ones(3, dtype=np.complex64))
