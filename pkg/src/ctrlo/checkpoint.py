"""Checkpoint files.

Layout (little-endian)::

    b"CTLOCKPT"  u32 version=1  u64 header_len  header (UTF-8 JSON)  payload

The JSON header holds the resolved config, the step, free-form ``extra``
metadata and a manifest of ``{name, shape, offset}`` entries; each array is
stored as float64 row-major at ``offset`` bytes into the payload.
"""
from __future__ import annotations

import json
import os
import struct

import numpy as np

from .config import RunConfig, from_dict
from .errors import FormatError
from .model import init_params, trainable

MAGIC = b"CTLOCKPT"
VERSION = 1


def dumps(params, config: RunConfig, step=0, extra=None):
    flat = trainable(params)
    manifest, chunks, offset = [], [], 0
    for name in sorted(flat):
        arr = np.ascontiguousarray(flat[name].data, dtype="<f8")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"config": config.to_dict(), "step": int(step), "extra": extra or {},
                         "params": manifest}, sort_keys=True).encode()
    return MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(chunks)


def save(path, params, config, step=0, extra=None):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(dumps(params, config, step, extra))
    os.replace(tmp, path)
    return path


def loads(buf):
    """-> (params, config, meta) with params rebuilt on the config's layout."""
    if buf[:8] != MAGIC:
        raise FormatError("not a checkpoint (bad magic)", 0)
    if len(buf) < 20:
        raise FormatError("truncated checkpoint header", len(buf))
    version, hlen = struct.unpack("<IQ", buf[8:20])
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 8)
    try:
        header = json.loads(buf[20:20 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"corrupt checkpoint header: {e}", 20) from None
    config = from_dict(header["config"])
    head_input = header.get("extra", {}).get("head_input", "features")
    params = init_params(config, head_input=head_input)
    flat = trainable(params)
    payload = memoryview(buf)[20 + hlen:]
    names = {e["name"] for e in header["params"]}
    if names != set(flat):
        missing = sorted(set(flat) - names)[:3]
        extra = sorted(names - set(flat))[:3]
        raise FormatError(f"checkpoint parameters do not match config (missing {missing}, unexpected {extra})")
    for e in header["params"]:
        shape = tuple(e["shape"])
        n = int(np.prod(shape)) * 8
        if e["offset"] + n > len(payload):
            raise FormatError(f"truncated payload for {e['name']}", 20 + hlen + e["offset"])
        if shape != flat[e["name"]].shape:
            raise FormatError(f"shape mismatch for {e['name']}: {shape} vs {flat[e['name']].shape}")
        arr = np.frombuffer(payload[e["offset"]:e["offset"] + n], dtype="<f8").reshape(shape)
        flat[e["name"]].data = arr.astype(np.float64)
    return params, config, {"step": header["step"], "extra": header["extra"]}


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
