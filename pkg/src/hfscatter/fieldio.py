"""Binary field files and their JSON sidecars.

Layout (little endian)::

    b"HFSF" | version u32 | n u32 | M u32 | L f64 | M^n complex128 (re, im)

Values are written with the first axis varying fastest.  Several fields on
the same grid (e.g. all orbitals) may follow one header back to back; the
count follows from the file size.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .spectral import POSITION, ComplexField, GridSpec

__all__ = ["MAGIC", "VERSION", "write_field", "read_field", "write_fields", "read_fields",
           "write_sidecar", "read_sidecar", "sha256_file"]

MAGIC = b"HFSF"
VERSION = 1
_HEADER = struct.Struct("<4sIIId")


def _payload(values: np.ndarray) -> bytes:
    arr = np.asarray(values, dtype="<c16")
    return arr.ravel(order="F").tobytes()


def write_fields(path, grid: GridSpec, arrays) -> Path:
    """Write one header followed by each array's samples."""
    path = Path(path)
    arrays = list(arrays)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, grid.dim, grid.points_per_axis, float(grid.half_width)))
        for a in arrays:
            a = np.asarray(a)
            if a.shape != grid.shape:
                raise ValueError(f"array shape {a.shape} does not match grid {grid.shape}")
            fh.write(_payload(a))
    return path


def write_field(path, field: ComplexField) -> Path:
    return write_fields(path, field.grid, [field.values])


def read_fields(path) -> tuple[GridSpec, list[np.ndarray]]:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: file too short for a field header")
    magic, version, n, m, half = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    grid = GridSpec(int(n), int(m), float(half))
    body = np.frombuffer(data, dtype="<c16", offset=_HEADER.size)
    if body.size % grid.size:
        raise ValueError(f"{path}: payload of {body.size} values is not a multiple of {grid.size}")
    out = [body[i * grid.size:(i + 1) * grid.size].reshape(grid.shape, order="F").astype(complex)
           for i in range(body.size // grid.size)]
    return grid, out


def read_field(path, space: str = POSITION) -> ComplexField:
    grid, arrays = read_fields(path)
    if len(arrays) != 1:
        raise ValueError(f"{path} holds {len(arrays)} fields; use read_fields")
    return ComplexField(grid, arrays[0], space)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return float(obj) if np.isfinite(obj) else str(float(obj))
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, complex):
        return {"re": obj.real, "im": obj.imag}
    return obj


def write_sidecar(path, meta: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_jsonable(meta), indent=2, sort_keys=True) + "\n")
    return path


def read_sidecar(path) -> dict:
    return json.loads(Path(path).read_text())


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
