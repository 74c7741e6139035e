"""Self-describing binary container for named tensors.

Layout: 4-byte magic ``VTF1``, little-endian uint64 header length, UTF-8 JSON
header ``{"version": 1, "tensors": [{"name", "dtype", "shape"}], "attrs": {}}``,
then raw C-order payloads in header order. All payloads are little-endian.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"VTF1"
VERSION = 1

_DTYPES = {
    "f32": "<f4",
    "f64": "<f8",
    "i32": "<i4",
    "i64": "<i8",
}
_NP_TO_TAG = {np.dtype(v): k for k, v in _DTYPES.items()}


def _dtype_tag(arr: np.ndarray) -> str:
    key = arr.dtype.newbyteorder("<")
    if key not in _NP_TO_TAG:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    return _NP_TO_TAG[key]


def save_tensors(path, tensors: dict[str, np.ndarray], attrs: dict | None = None) -> None:
    """Write named arrays plus a JSON-serializable attrs dict."""
    entries = []
    payloads = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        tag = _dtype_tag(arr)
        entries.append({"name": name, "dtype": tag, "shape": list(arr.shape)})
        payloads.append(arr.astype(_DTYPES[tag], copy=False).tobytes())
    header = {"version": VERSION, "tensors": entries, "attrs": attrs or {}}
    blob = json.dumps(header, separators=(",", ":"), sort_keys=False).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for payload in payloads:
            fh.write(payload)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read back ``(tensors, attrs)``; validates magic, dtypes and sizes."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", raw[4:12])
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header: {exc}") from exc
    if header.get("version") != VERSION:
        raise FormatError(f"{path}: unsupported version {header.get('version')}")
    tensors: dict[str, np.ndarray] = {}
    offset = 12 + hlen
    for entry in header["tensors"]:
        tag = entry["dtype"]
        if tag not in _DTYPES:
            raise FormatError(f"{path}: unknown dtype tag {tag!r}")
        shape = tuple(int(s) for s in entry["shape"])
        dt = np.dtype(_DTYPES[tag])
        nbytes = dt.itemsize * int(np.prod(shape, dtype=np.int64)) if shape else dt.itemsize
        if offset + nbytes > len(raw):
            raise FormatError(f"{path}: payload for {entry['name']!r} truncated")
        arr = np.frombuffer(raw[offset : offset + nbytes], dtype=dt).reshape(shape)
        tensors[entry["name"]] = arr.copy()
        offset += nbytes
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return tensors, header.get("attrs", {})
