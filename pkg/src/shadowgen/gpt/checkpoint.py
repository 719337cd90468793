"""Checkpoint files.

Layout: magic ``b"SGPTCKPT"``, uint32 format version, uint64 header length,
UTF-8 JSON header, then raw little-endian arrays back to back.  The header
echoes the model config, lists every array (name, dtype, shape) in write
order, and carries free-form training metadata.  Parameters come first in
the model's declared order, followed by optimizer moments when present.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, check_params, param_shapes

MAGIC = b"SGPTCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


def save(path, cfg: ModelConfig, params: dict, optim: dict | None = None, meta: dict | None = None) -> str:
    """Write a checkpoint; returns its SHA-256."""
    arrays = [("param." + k, params[k]) for k in param_shapes(cfg)]
    arrays += [("optim." + k, v) for k, v in (optim or {}).items()]
    header = {
        "config": cfg.to_dict(),
        "arrays": [[name, a.dtype.str, list(a.shape)] for name, a in arrays],
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<")).tobytes() for _, a in arrays)
    blob = _PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + body
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
    return hashlib.sha256(blob).hexdigest()


def load(path):
    """Return ``(config, params, optim_arrays, meta)``."""
    blob = Path(path).read_bytes()
    if len(blob) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[_PREFIX.size:_PREFIX.size + hlen])
    cfg = ModelConfig(**header["config"])
    offset = _PREFIX.size + hlen
    params, optim = {}, {}
    for name, dtype, shape in header["arrays"]:
        dt = np.dtype(dtype)
        size = int(np.prod(shape)) * dt.itemsize
        if offset + size > len(blob):
            raise CheckpointError(f"{path}: payload ends inside {name}")
        arr = np.frombuffer(blob, dtype=dt, count=int(np.prod(shape)), offset=offset).reshape(shape)
        arr = arr.astype(dt.newbyteorder("="))
        offset += size
        kind, key = name.split(".", 1)
        (params if kind == "param" else optim)[key] = arr
    if offset != len(blob):
        raise CheckpointError(f"{path}: trailing bytes after payload")
    check_params(cfg, params)
    return cfg, params, optim, header["meta"]


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
