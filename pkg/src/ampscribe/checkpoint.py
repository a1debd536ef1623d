"""Single-file binary checkpoints: version tag, config JSON, named arrays.

Layout (all integers little-endian):

    magic   8 bytes  b"AMPCKPT1"
    u32     format version (currently 1)
    u32     length of the UTF-8 config JSON
    bytes   config JSON (carries a "component" tag, e.g. "tit")
    u32     number of parameters
    per parameter:
        u16     name length, then UTF-8 name
        u8      dtype code (0 = float64, 1 = float32)
        u8      ndim
        u32*n   dims
        bytes   row-major array data, little-endian
"""
from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"AMPCKPT1"
VERSION = 1

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1}


def save_checkpoint(path, component: str, config: dict, params: dict) -> None:
    """Write named arrays with a component tag and config dict."""
    doc = dict(config)
    doc["component"] = component
    blob = json.dumps(doc, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name])
            if arr.dtype not in _CODES:
                raise ValueError(f"{name}: unsupported dtype {arr.dtype}")
            encoded = name.encode()
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def load_checkpoint(path):
    """Return (component, config, {name: array})."""
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise ValueError(f"{path}: not an ampscribe checkpoint")
        version, cfg_len = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        config = json.loads(fh.read(cfg_len).decode())
        component = config.pop("component", "")
        (n_params,) = struct.unpack("<I", fh.read(4))
        params = {}
        for _ in range(n_params):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode()
            code, ndim = struct.unpack("<BB", fh.read(2))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            dtype = _DTYPES[code]
            count = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(fh.read(count * dtype.itemsize), dtype=dtype)
            params[name] = data.reshape(shape).astype(dtype.newbyteorder("="))
        return component, config, params


def describe_checkpoint(path) -> str:
    """Human-readable parameter table for the `describe` CLI."""
    component, config, params = load_checkpoint(path)
    lines = [
        f"component: {component}",
        f"config: {json.dumps(config, sort_keys=True)}",
        f"{'name':40s} {'shape':>18s} {'dtype':>8s} {'count':>10s}",
    ]
    total = 0
    for name in sorted(params):
        arr = params[name]
        total += arr.size
        shape = "x".join(map(str, arr.shape)) if arr.ndim else "scalar"
        lines.append(f"{name:40s} {shape:>18s} {str(arr.dtype):>8s} {arr.size:>10d}")
    lines.append(f"{'total':40s} {'':>18s} {'':>8s} {total:>10d}")
    return "\n".join(lines)
