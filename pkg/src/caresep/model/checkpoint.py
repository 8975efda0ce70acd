"""Versioned, byte-stable checkpoint files (safetensors container + JSON metadata)."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from safetensors.numpy import load, save

FORMAT = "caresep-checkpoint"
VERSION = 1


def state_arrays(module: torch.nn.Module, prefix: str = "") -> dict:
    return {prefix + k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def save_checkpoint(path, arrays: dict, *, kind: str, config: dict, seed: int, step: int, extra=None) -> None:
    meta = {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "config": config,
        "seed": int(seed),
        "step": int(step),
        "extra": extra or {},
    }
    # a single metadata key: the container keeps metadata in a hash map, so several keys serialise in varying order
    blob = save({k: np.ascontiguousarray(arrays[k]) for k in sorted(arrays)}, metadata={FORMAT: json.dumps(meta, sort_keys=True)})
    Path(path).write_bytes(blob)


def load_checkpoint(path):
    """Returns ``(arrays, meta)``; ``meta`` holds format, version, kind, config, seed, step and extra."""
    blob = Path(path).read_bytes()
    arrays = load(blob)
    header_len = int.from_bytes(blob[:8], "little")
    raw = json.loads(blob[8:8 + header_len]).get("__metadata__", {})
    if FORMAT not in raw:
        raise ValueError(f"{path}: not a {FORMAT} file")
    meta = json.loads(raw[FORMAT])
    if meta.get("version") != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    return arrays, meta


def load_into(module: torch.nn.Module, arrays: dict, prefix: str = "") -> None:
    """Copy ``prefix``-ed arrays into ``module``; names and shapes must match exactly."""
    own = module.state_dict()
    sub = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
    missing, unexpected = set(own) - set(sub), set(sub) - set(own)
    if missing or unexpected:
        raise ValueError(f"checkpoint/model mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(unexpected)[:5]}")
    for k, v in sub.items():
        if tuple(own[k].shape) != v.shape:
            raise ValueError(f"checkpoint/model mismatch for {k}: {v.shape} vs {tuple(own[k].shape)}")
    module.load_state_dict({k: torch.as_tensor(v, dtype=own[k].dtype) for k, v in sub.items()})
