"""ADRS binary tensor files.

Version 1 holds one unnamed tensor::

    b"ADRS" | u32 version=1 | u32 rank | u32 dims[rank] | f32 payload

Version 2 holds named tensors (features, checkpoints)::

    b"ADRS" | u32 version=2 | u32 count |
        count x (u32 name_len | utf-8 name | u32 rank | u32 dims[rank] | f32 payload)

All integers and floats are little-endian; payloads are row-major.
"""

from __future__ import annotations

import io
import struct

import numpy as np

MAGIC = b"ADRS"
VERSION_SINGLE = 1
VERSION_NAMED = 2


class ContainerError(ValueError):
    pass


def _write_record(fh, array):
    a = np.ascontiguousarray(array, dtype="<f4")
    fh.write(struct.pack("<I", a.ndim))
    fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
    fh.write(a.tobytes())


def _read_exact(fh, n):
    buf = fh.read(n)
    if len(buf) != n:
        raise ContainerError("truncated ADRS file")
    return buf


def _read_record(fh):
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
    n = int(np.prod(dims, dtype=np.int64))
    data = np.frombuffer(_read_exact(fh, 4 * n), dtype="<f4")
    return data.reshape(dims).astype(np.float32)


def _read_header(fh):
    if _read_exact(fh, 4) != MAGIC:
        raise ContainerError("not an ADRS file (bad magic)")
    (version,) = struct.unpack("<I", _read_exact(fh, 4))
    return version


def dumps_tensor(array):
    fh = io.BytesIO()
    fh.write(MAGIC + struct.pack("<I", VERSION_SINGLE))
    _write_record(fh, array)
    return fh.getvalue()


def dumps_named(tensors):
    fh = io.BytesIO()
    fh.write(MAGIC + struct.pack("<II", VERSION_NAMED, len(tensors)))
    for name, array in tensors.items():
        raw = name.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)) + raw)
        _write_record(fh, array)
    return fh.getvalue()


def loads(buf):
    """Parse bytes into an array (version 1) or a dict of arrays (version 2)."""
    fh = io.BytesIO(buf)
    version = _read_header(fh)
    if version == VERSION_SINGLE:
        out = _read_record(fh)
    elif version == VERSION_NAMED:
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        out = {}
        for _ in range(count):
            (n,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, n).decode("utf-8")
            out[name] = _read_record(fh)
    else:
        raise ContainerError(f"unsupported ADRS version {version}")
    if fh.read(1):
        raise ContainerError("trailing bytes after ADRS payload")
    return out


def save_tensor(path, array):
    with open(path, "wb") as fh:
        fh.write(dumps_tensor(array))


def save_named(path, tensors):
    with open(path, "wb") as fh:
        fh.write(dumps_named(tensors))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
