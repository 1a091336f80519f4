"""Versioned binary container for named float64 tensors.

Layout (all integers little-endian)::

    offset 0   8 bytes   magic b"RDTENSOR"
    offset 8   uint32    container version (currently 1)
    offset 12  uint64    header length L in bytes
    offset 20  L bytes   UTF-8 JSON header (sorted keys):
                         {"metadata": {...},
                          "tensors": [{"name", "dtype": "<f8", "shape", "offset", "nbytes"}, ...]}
    offset 20+L          tensor payloads, row-major, concatenated in header order;
                         "offset" is relative to the start of the payload section

The same container stores model checkpoints (one entry per parameter name)
and activation dumps (one entry per layer).
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import CompatibilityError, DataParseError

MAGIC = b"RDTENSOR"
VERSION = 1


def save_tensors(path, tensors: dict, metadata: dict | None = None) -> Path:
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name, value in tensors.items():
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        arr = np.array(value, dtype="<f8", order="C")
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": "<f8", "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"metadata": metadata or {}, "tensors": entries},
                        sort_keys=True, separators=(",", ":")).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(header)))
        f.write(header)
        for raw in blobs:
            f.write(raw)
    return path


def load_tensors(path):
    """Return ``(dict name -> ndarray, metadata)``."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise DataParseError(f"{path}: not a tensor container (bad magic)")
    version, hlen = struct.unpack_from("<IQ", data, 8)
    if version != VERSION:
        raise DataParseError(f"{path}: unsupported container version {version}")
    try:
        header = json.loads(data[20:20 + hlen])
    except json.JSONDecodeError as e:
        raise DataParseError(f"{path}: corrupt header: {e.msg}") from None
    base = 20 + hlen
    out = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        if start + e["nbytes"] > len(data):
            raise DataParseError(f"{path}: truncated payload for {e['name']!r}")
        arr = np.frombuffer(data, dtype=e["dtype"], count=e["nbytes"] // 8, offset=start)
        out[e["name"]] = arr.reshape(e["shape"]).copy()
    return out, header["metadata"]


def save_model(path, model, metadata: dict | None = None) -> Path:
    meta = {"kind": "model", "network": model.cfg.to_dict(), "seed": model.seed}
    meta.update(metadata or {})
    return save_tensors(path, dict(model.state_dict()), meta)


def load_model(path):
    """Rebuild a :class:`~roaddefect.network.Model` and its metadata from a checkpoint."""
    from .network import NetworkConfig, build_network

    tensors, meta = load_tensors(path)
    if meta.get("kind") != "model":
        raise CompatibilityError(f"{path}: not a model checkpoint")
    cfg = NetworkConfig.from_dict(meta["network"])
    model = build_network(cfg, meta.get("seed", 0))
    state = model.state_dict()
    if set(state) != set(tensors):
        missing = sorted(set(state) ^ set(tensors))[:5]
        raise CompatibilityError(f"{path}: parameter names do not match the topology: {missing}")
    for name, arr in tensors.items():
        if tuple(state[name].shape) != arr.shape:
            raise CompatibilityError(f"{path}: {name} has shape {arr.shape}, expected "
                                     f"{tuple(state[name].shape)}")
    model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    return model, meta
