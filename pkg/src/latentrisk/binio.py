"""Binary container used for curvesets, data matrices and fitted models.

Layout (all little-endian)::

    bytes 0-7    magic  b"LRSKBIN1"
    bytes 8-11   uint32 length H of the JSON header
    H bytes      UTF-8 JSON header, keys sorted
    ...          array bodies, row-major, in header order

The header holds ``kind``, free-form ``meta`` and an ``arrays`` list of
``{"name", "dtype", "shape"}`` entries. Writing the same content twice gives
identical bytes; nothing time-dependent is stored.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ModelArtifactError

MAGIC = b"LRSKBIN1"
_DTYPES = {"f8": "<f8", "i8": "<i8", "u1": "|u1"}


def dumps(kind: str, arrays: dict[str, np.ndarray], meta: dict[str, Any] | None = None) -> bytes:
    specs = []
    bodies = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype.kind == "f":
            code = "f8"
        elif arr.dtype.kind in "iu" and arr.dtype != np.uint8:
            code = "i8"
        elif arr.dtype == np.uint8 or arr.dtype.kind == "b":
            code = "u1"
        else:
            raise TypeError(f"unsupported dtype {arr.dtype} for array {name!r}")
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        specs.append({"name": name, "dtype": code, "shape": list(data.shape)})
        bodies.append(data.tobytes(order="C"))
    header = json.dumps(
        {"kind": kind, "meta": meta or {}, "arrays": specs},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    return MAGIC + struct.pack("<I", len(header)) + header + b"".join(bodies)


def loads(blob: bytes, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if blob[:8] != MAGIC:
        raise ModelArtifactError("not a latentrisk binary artifact (bad magic)")
    if len(blob) < 12:
        raise ModelArtifactError("truncated artifact header")
    (hlen,) = struct.unpack("<I", blob[8:12])
    try:
        header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ModelArtifactError(f"corrupt artifact header ({e})") from e
    if kind is not None and header["kind"] != kind:
        raise ModelArtifactError(f"expected artifact kind {kind!r}, found {header['kind']!r}")
    offset = 12 + hlen
    arrays = {}
    for spec in header["arrays"]:
        dtype = np.dtype(_DTYPES[spec["dtype"]])
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        if offset + count * dtype.itemsize > len(blob):
            raise ModelArtifactError(f"truncated artifact body at array {spec['name']!r}")
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=offset).reshape(shape)
        arrays[spec["name"]] = arr.copy()
        offset += count * dtype.itemsize
    if offset != len(blob):
        raise ModelArtifactError("trailing bytes after artifact body")
    return arrays, header["meta"]


def write(path: str | Path, kind: str, arrays: dict[str, np.ndarray], meta: dict[str, Any] | None = None) -> None:
    Path(path).write_bytes(dumps(kind, arrays, meta))


def read(path: str | Path, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    return loads(Path(path).read_bytes(), kind)


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
