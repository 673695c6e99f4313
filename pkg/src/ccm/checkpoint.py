"""Versioned binary container for named arrays.

Layout: 8-byte magic, uint32 little-endian header length, UTF-8 JSON
header, raw little-endian payload. The header carries a format-version
integer, an arbitrary ``meta`` dict (model config, adapter hyperparams,
...) and one record per array: name, dtype, shape and byte offset into
the payload. Arrays are stored row-major.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"CCMCKPT\x00"
FORMAT_VERSION = 1

_DTYPES = {"float32": np.float32, "float64": np.float64}


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray],
                meta: dict | None = None) -> None:
    records = []
    payload = bytearray()
    for name, arr in arrays.items():
        if arr.dtype.name not in _DTYPES:
            raise DataError(f"unsupported dtype {arr.dtype} for record {name!r}")
        raw = np.ascontiguousarray(arr).tobytes()
        records.append({
            "name": name,
            "dtype": arr.dtype.name,
            "shape": list(arr.shape),
            "offset": len(payload),
            "nbytes": len(raw),
        })
        payload.extend(raw)
    header = json.dumps({
        "format_version": FORMAT_VERSION,
        "meta": meta or {},
        "records": records,
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(payload)


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a container back; returns (arrays, meta)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if blob[:8] != MAGIC:
        raise DataError(f"{path}: not a checkpoint container")
    (header_len,) = struct.unpack("<I", blob[8:12])
    try:
        header = json.loads(blob[12:12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: corrupt header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise DataError(
            f"{path}: format version {header.get('format_version')} "
            f"!= supported {FORMAT_VERSION}")
    payload = blob[12 + header_len:]
    arrays: dict[str, np.ndarray] = {}
    for rec in header["records"]:
        dtype = _DTYPES.get(rec["dtype"])
        if dtype is None:
            raise DataError(f"{path}: record {rec['name']!r} has bad dtype {rec['dtype']}")
        lo, hi = rec["offset"], rec["offset"] + rec["nbytes"]
        if hi > len(payload):
            raise DataError(f"{path}: record {rec['name']!r} overruns payload")
        arr = np.frombuffer(payload[lo:hi], dtype=dtype).reshape(rec["shape"]).copy()
        arrays[rec["name"]] = arr
    return arrays, header["meta"]
