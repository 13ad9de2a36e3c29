"""Self-describing binary container shared by checkpoints, replay and dataset files.

Layout::

    b"LLDC"                 magic
    u8                      format version
    u32 (little endian)     header length in bytes
    header                  UTF-8 JSON: {"kind", "meta", "arrays": [{"name", "shape", "dtype"}]}
    payload                 arrays in header order, C order, little endian

Writing is canonical (sorted JSON keys, fixed dtypes) so save -> load -> save
reproduces the same bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"LLDC"
FORMAT_VERSION = 1
_ALLOWED_DTYPES = {"<f8", "<i8", "|u1"}


class FormatError(Exception):
    """Corrupt or incompatible container; ``offset`` is the byte position of the problem."""

    def __init__(self, offset: int, message: str):
        self.offset = offset
        super().__init__(f"byte {offset}: {message}")


def _canonical(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype.kind == "f":
        return np.ascontiguousarray(arr, dtype="<f8")
    if arr.dtype.kind == "b" or arr.dtype == np.uint8:
        return np.ascontiguousarray(arr, dtype="|u1")
    if arr.dtype.kind in "iu":
        return np.ascontiguousarray(arr, dtype="<i8")
    raise TypeError(f"unsupported dtype {arr.dtype}")


def dumps(kind: str, meta: Mapping[str, Any], arrays: Mapping[str, np.ndarray]) -> bytes:
    arrays = {k: _canonical(v) for k, v in arrays.items()}
    header = {
        "kind": kind,
        "meta": meta,
        "arrays": [{"name": k, "shape": list(v.shape), "dtype": v.dtype.str} for k, v in arrays.items()],
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<BI", FORMAT_VERSION, len(hbytes)), hbytes]
    parts.extend(v.tobytes() for v in arrays.values())
    return b"".join(parts)


def loads(blob: bytes, expected_kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < 9:
        raise FormatError(0, "file shorter than the fixed preamble")
    if blob[:4] != MAGIC:
        raise FormatError(0, f"bad magic {blob[:4]!r}")
    version, hlen = struct.unpack_from("<BI", blob, 4)
    if version != FORMAT_VERSION:
        raise FormatError(4, f"unsupported format version {version}")
    start = 9
    if start + hlen > len(blob):
        raise FormatError(5, f"header length {hlen} runs past end of file")
    try:
        header = json.loads(blob[start : start + hlen].decode("utf-8"))
        kind, meta, specs = header["kind"], header["meta"], header["arrays"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(start, f"unreadable header ({exc})") from None
    if expected_kind is not None and kind != expected_kind:
        raise FormatError(start, f"expected a {expected_kind!r} container, found {kind!r}")
    offset = start + hlen
    arrays = {}
    for spec in specs:
        dtype = spec.get("dtype")
        if dtype not in _ALLOWED_DTYPES:
            raise FormatError(start, f"array {spec.get('name')!r} has unsupported dtype {dtype!r}")
        shape = tuple(int(d) for d in spec["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * np.dtype(dtype).itemsize
        if offset + nbytes > len(blob):
            raise FormatError(offset, f"array {spec['name']!r} truncated")
        arrays[spec["name"]] = np.frombuffer(blob, dtype=dtype, count=nbytes // np.dtype(dtype).itemsize,
                                             offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise FormatError(offset, f"{len(blob) - offset} trailing bytes after payload")
    meta = dict(meta)
    meta["_kind"] = kind
    return meta, arrays


def write(path: str | Path, kind: str, meta: Mapping[str, Any], arrays: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(kind, meta, arrays))


def read(path: str | Path, expected_kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes(), expected_kind)
