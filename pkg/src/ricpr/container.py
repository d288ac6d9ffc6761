"""Versioned binary container shared by gallery and model files.

Byte layout (all integers little-endian)::

    offset  size  content
    0       8     magic (file kind, e.g. b"RICPRGAL")
    8       4     uint32 format version
    12      4     uint32 header length H
    16      H     UTF-8 JSON header, keys sorted, compact separators
    16+H    ...   array payloads, concatenated in header order, C order

The header holds free-form metadata under ``"meta"`` and an ``"arrays"`` list
of ``{"name", "dtype", "shape"}`` entries describing the payloads. Dtypes are
numpy little-endian type strings (``"<f8"``, ``"<i4"``, ``"|b1"``). Writing the
same content twice yields identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np


class ContainerError(ValueError):
    pass


def dumps(magic: bytes, version: int, meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    entries = []
    payloads = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr)
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape)})
        payloads.append(a.tobytes(order="C"))
    header = json.dumps(
        {"meta": meta, "arrays": entries}, sort_keys=True, separators=(",", ":"), allow_nan=False
    ).encode("utf-8")
    return magic + struct.pack("<II", version, len(header)) + header + b"".join(payloads)


def loads(data: bytes, magic: bytes, max_version: int) -> tuple[int, dict, dict[str, np.ndarray]]:
    if len(data) < 16 or data[:8] != magic:
        raise ContainerError(f"not a {magic.decode(errors='replace')} file (bad magic)")
    version, hlen = struct.unpack("<II", data[8:16])
    if version > max_version:
        raise ContainerError(
            f"file format version {version} is newer than supported version {max_version}"
        )
    if version < 1:
        raise ContainerError(f"invalid format version {version}")
    try:
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"corrupt header: {exc}") from exc
    pos = 16 + hlen
    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(data):
            raise ContainerError(f"truncated payload for array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(data, dtype=dtype, count=int(np.prod(shape)), offset=pos).reshape(shape).copy()
        pos += nbytes
    if pos != len(data):
        raise ContainerError("trailing bytes after last array")
    return version, header["meta"], arrays


def write(path, magic: bytes, version: int, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(magic, version, meta, arrays))


def read(path, magic: bytes, max_version: int) -> tuple[int, dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes(), magic, max_version)
