"""Binary checkpoint container.

Layout (all integers little-endian uint32)::

    b"AFRD" | version | len(config_json) | config_json (utf-8)
    | n_blobs | for each blob: len(name) name ndim dims... float32 data

The config block carries model dims, hyperparameters and dataset
normalisation statistics. Blob names prefixed ``adam.m.`` / ``adam.v.`` hold
optimizer moments so a run can be resumed.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"AFRD"
VERSION = 1


class CheckpointError(ValueError):
    pass


def write_checkpoint(path, config: dict, blobs: dict[str, np.ndarray]) -> None:
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    out = bytearray()
    out += MAGIC
    out += struct.pack("<II", VERSION, len(cfg))
    out += cfg
    out += struct.pack("<I", len(blobs))
    for name in sorted(blobs):
        arr = np.asarray(blobs[name])
        key = name.encode("utf-8")
        out += struct.pack("<I", len(key)) + key
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an AFRD checkpoint")
    version, cfg_len = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    try:
        config = json.loads(buf[pos : pos + cfg_len].decode("utf-8"))
        pos += cfg_len
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        blobs = {}
        for _ in range(n):
            (klen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + klen].decode("utf-8")
            pos += klen
            (ndim,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            count = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * count > len(buf):
                raise CheckpointError(f"{path}: truncated blob {name!r}")
            blobs[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * count
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    return config, blobs
