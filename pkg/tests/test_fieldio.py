import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hfscatter.fieldio import (MAGIC, read_field, read_fields, read_sidecar, sha256_file,
                               write_field, write_fields, write_sidecar)
from hfscatter.spectral import ComplexField, GridSpec


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 3), st.sampled_from([8, 16]), st.floats(0.5, 20), st.integers(0, 2**31))
def test_field_round_trip(dim, m, half, seed):
    import tempfile
    from pathlib import Path

    grid = GridSpec(dim, m, half)
    rng = np.random.default_rng(seed)
    vals = rng.standard_normal(grid.shape) + 1j * rng.standard_normal(grid.shape)
    with tempfile.TemporaryDirectory() as d:
        path = write_field(Path(d) / "f.hfsf", ComplexField(grid, vals))
        back = read_field(path)
    assert back.grid == grid
    assert np.array_equal(back.values, vals)


def test_header_layout(tmp_path):
    grid = GridSpec(2, 8, 3.0)
    vals = np.arange(64, dtype=complex).reshape(8, 8)
    path = write_field(tmp_path / "f.hfsf", ComplexField(grid, vals))
    raw = path.read_bytes()
    magic, version, n, m, half = struct.unpack_from("<4sIIId", raw)
    assert (magic, version, n, m, half) == (MAGIC, 1, 2, 8, 3.0)
    body = np.frombuffer(raw, dtype="<c16", offset=struct.calcsize("<4sIIId"))
    # first axis varies fastest
    assert body[1] == vals[1, 0]
    assert len(raw) == struct.calcsize("<4sIIId") + 64 * 16


def test_multiple_fields(tmp_path):
    grid = GridSpec(1, 8, 2.0)
    arrays = [np.full(8, k + 1j) for k in range(3)]
    write_fields(tmp_path / "m.hfsf", grid, arrays)
    g, back = read_fields(tmp_path / "m.hfsf")
    assert g == grid and len(back) == 3
    assert all(np.array_equal(a, b) for a, b in zip(arrays, back))
    with pytest.raises(ValueError, match="read_fields"):
        read_field(tmp_path / "m.hfsf")


def test_bad_files(tmp_path):
    grid = GridSpec(1, 8, 2.0)
    with pytest.raises(ValueError, match="does not match"):
        write_fields(tmp_path / "x.hfsf", grid, [np.zeros(7)])
    (tmp_path / "short").write_bytes(b"HF")
    with pytest.raises(ValueError, match="too short"):
        read_fields(tmp_path / "short")
    good = write_fields(tmp_path / "g.hfsf", grid, [np.zeros(8)]).read_bytes()
    (tmp_path / "magic").write_bytes(b"XXXX" + good[4:])
    with pytest.raises(ValueError, match="magic"):
        read_fields(tmp_path / "magic")
    (tmp_path / "trunc").write_bytes(good[:-16])
    with pytest.raises(ValueError, match="multiple"):
        read_fields(tmp_path / "trunc")


def test_sidecar_and_checksum(tmp_path):
    meta = {"t": np.float64(1.5), "norms": np.array([0.3, 0.3]), "n": np.int64(2),
            "flag": np.bool_(True), "z": 1 + 2j, "bad": float("nan")}
    path = write_sidecar(tmp_path / "m.json", meta)
    back = read_sidecar(path)
    assert back == {"t": 1.5, "norms": [0.3, 0.3], "n": 2, "flag": True,
                    "z": {"re": 1.0, "im": 2.0}, "bad": "nan"}
    assert sha256_file(path) == sha256_file(path)
    assert len(sha256_file(path)) == 64
