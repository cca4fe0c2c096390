"""Checkpoint files.

Layout: the 8-byte magic ``COTFCKPT``, a little-endian uint64 header length, a
UTF-8 JSON header (format version, model config, parameter manifest with
names/shapes/offsets), then every parameter as little-endian float32 in
manifest order.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig
from .model import Params, check_params, param_shapes

MAGIC = b"COTFCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _header(config: ModelConfig, params: Params, extra: dict | None) -> dict:
    manifest = []
    offset = 0
    for name, _ in param_shapes(config):
        shape = list(params[name].shape)
        count = int(np.prod(shape)) if shape else 1
        manifest.append({"name": name, "shape": shape, "offset": offset, "count": count})
        offset += 4 * count
    return {
        "format_version": FORMAT_VERSION,
        "config": config.to_dict(),
        "manifest": manifest,
        "data_bytes": offset,
        "extra": extra or {},
    }


def dumps(params: Params, config: ModelConfig, extra: dict | None = None) -> bytes:
    check_params(config, params)
    header = _header(config, params, extra)
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(
        params[m["name"]].detach().to(torch.float32).numpy().astype("<f4").tobytes()
        for m in header["manifest"]
    )
    return MAGIC + struct.pack("<Q", len(head)) + head + body


def save_checkpoint(params: Params, config: ModelConfig, path: str | Path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(params, config, extra))
    return path


def read_header(blob: bytes) -> tuple[dict, int]:
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (n,) = struct.unpack("<Q", blob[8:16])
    if len(blob) < 16 + n:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(blob[16 : 16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from None
    if not isinstance(header, dict) or header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {header.get('format_version')!r}")
    return header, 16 + n


def loads(blob: bytes, config: ModelConfig | None = None) -> tuple[Params, ModelConfig, dict]:
    header, start = read_header(blob)
    try:
        stored = ModelConfig.from_dict(header["config"])
        manifest = header["manifest"]
        data_bytes = int(header["data_bytes"])
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from None
    if len(blob) != start + data_bytes:
        raise CheckpointError(f"checkpoint data is {len(blob) - start} bytes, header says {data_bytes}")
    config = config or stored
    expected = dict(param_shapes(config))
    names = [m["name"] for m in manifest]
    if sorted(names) != sorted(expected):
        raise CheckpointError("checkpoint parameters do not match the model config")
    params: Params = {}
    for m in manifest:
        shape = tuple(m["shape"])
        if shape != expected[m["name"]]:
            raise CheckpointError(f"{m['name']}: stored shape {shape} != expected {expected[m['name']]}")
        lo = start + m["offset"]
        arr = np.frombuffer(blob, dtype="<f4", count=m["count"], offset=lo)
        params[m["name"]] = torch.from_numpy(arr.astype(np.float32).reshape(shape))
    return params, config, header.get("extra", {})


def load_checkpoint(path: str | Path, config: ModelConfig | None = None) -> tuple[Params, ModelConfig]:
    """Read a checkpoint; ``config`` overrides the stored one if shapes agree."""
    blob = Path(path).read_bytes()
    params, config, _ = loads(blob, config)
    return params, config


def checkpoint_id(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]
