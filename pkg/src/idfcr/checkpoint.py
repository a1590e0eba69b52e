"""Deterministic binary checkpoint container.

Layout: 8-byte magic, little-endian u64 header length, a canonical JSON
header (sorted keys, no whitespace) describing phase/step/config and the
array table, then each array's raw bytes in header order.  Identical
content always serializes to identical bytes, so save -> load -> save
round-trips byte-for-byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError

MAGIC = b"IDFCRCK1"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    phase: str
    step: int
    config: dict
    state: dict  # name -> ndarray


def save_checkpoint(path, phase, state, config=None, step=0):
    entries = []
    blobs = []
    for name in sorted(state):
        src = np.asarray(state[name])
        # ascontiguousarray promotes 0-d to 1-d, so record the shape first
        arr = np.ascontiguousarray(src)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        entries.append(
            {"name": name, "dtype": arr.dtype.str, "shape": list(src.shape)}
        )
        blobs.append(arr.tobytes())
    header = json.dumps(
        {
            "version": FORMAT_VERSION,
            "phase": str(phase),
            "step": int(step),
            "config": config or {},
            "arrays": entries,
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < len(MAGIC) + 8 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack_from("<Q", raw, len(MAGIC))
    start = len(MAGIC) + 8
    try:
        header = json.loads(raw[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {header.get('version')} "
            f"unsupported (expected {FORMAT_VERSION})"
        )
    state = {}
    offset = start + hlen
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated array {entry['name']!r}")
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
        state[entry["name"]] = arr.reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return Checkpoint(
        phase=header["phase"], step=header["step"],
        config=header["config"], state=state,
    )
