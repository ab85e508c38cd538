"""Flat binary container of named arrays.

Layout: magic, u64 little-endian header length, UTF-8 JSON header, then raw
C-order little-endian array bytes. Arrays are serialized in lexicographic
name order, so equal contents give byte-identical files. The header carries
each array's dtype, shape, and offset plus an arbitrary JSON ``meta`` block.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import ParseError

MAGIC = b"CMMC\x01\x00"
_DTYPES = {"f8": "<f8", "f4": "<f4", "i8": "<i8", "b1": "|b1"}
_CODES = {np.dtype("<f8"): "f8", np.dtype("<f4"): "f4", np.dtype("<i8"): "i8", np.dtype("bool"): "b1"}


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = {}
    offset = 0
    names = sorted(arrays)
    for name in names:
        arr = np.ascontiguousarray(arrays[name])
        code = _CODES.get(arr.dtype)
        if code is None:
            raise ParseError(f"array '{name}' has unsupported dtype {arr.dtype}")
        entries[name] = {
            "dtype": code,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": arr.nbytes,
        }
        offset += arr.nbytes
    header = json.dumps(
        {"arrays": entries, "meta": meta or {}},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for name in names:
            fh.write(np.ascontiguousarray(arrays[name]).astype(_DTYPES[entries[name]["dtype"]], copy=False).tobytes())


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ParseError(f"{path}: not a checkpoint container")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        try:
            header = json.loads(fh.read(header_len).decode("utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise ParseError(f"{path}: bad container header ({exc})") from None
        payload = fh.read()
    arrays = {}
    for name, entry in header["arrays"].items():
        start, nbytes = entry["offset"], entry["nbytes"]
        raw = payload[start:start + nbytes]
        if len(raw) != nbytes:
            raise ParseError(f"{path}: truncated payload for array '{name}'")
        arrays[name] = np.frombuffer(raw, dtype=_DTYPES[entry["dtype"]]).reshape(entry["shape"]).copy()
    return arrays, header.get("meta", {})
