"""Reader for the dump container format.

Layout (independent re-implementation of the producer's wire format):
magic ``CMMC\\x01\\x00``, u64 little-endian header length, UTF-8 JSON header
with per-array dtype/shape/offset, then raw little-endian C-order payload.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"CMMC\x01\x00"
DTYPES = {"f8": "<f8", "f4": "<f4", "i8": "<i8", "b1": "|b1"}


class ContainerError(Exception):
    pass


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ContainerError(f"{path}: bad magic")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        payload = fh.read()
    arrays = {}
    for name, entry in header["arrays"].items():
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise ContainerError(f"{path}: truncated array '{name}'")
        arrays[name] = np.frombuffer(raw, dtype=DTYPES[entry["dtype"]]).reshape(entry["shape"]).copy()
    return arrays, header.get("meta", {})
