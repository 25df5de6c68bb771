"""Versioned flat-binary checkpoint: raw little-endian tensor bytes plus a
text index carrying the config and per-tensor layout. No serialization
dependency; the .idx file is the format contract.
"""

from __future__ import annotations

from dataclasses import fields
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .model import ModelConfig

FORMAT_TAG = "gka-checkpoint v1"

_DTYPE_TAGS = {"float32": "<f4", "float64": "<f8"}


def save_checkpoint(prefix, params, config, meta=None):
    """Write <prefix>.bin and <prefix>.idx; returns the two paths."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    bin_path = prefix.with_suffix(".bin")
    idx_path = prefix.with_suffix(".idx")
    offset = 0
    lines = [FORMAT_TAG]
    for key, val in (meta or {}).items():
        lines.append(f"meta {key}={val}")
    for fld in fields(config):
        lines.append(f"config {fld.name}={getattr(config, fld.name)}")
    with open(bin_path, "wb") as fb:
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name])
            tag = str(arr.dtype)
            if tag not in _DTYPE_TAGS:
                raise ConfigError(f"unsupported checkpoint dtype {tag} for {name!r}")
            shape = ",".join(str(s) for s in arr.shape)
            lines.append(f"tensor {name} {tag} {shape} {offset} {arr.size}")
            fb.write(arr.astype(_DTYPE_TAGS[tag]).tobytes())
            offset += arr.size * arr.itemsize
    with open(idx_path, "w") as fi:
        fi.write("\n".join(lines) + "\n")
    return bin_path, idx_path


def load_checkpoint(prefix):
    """Read a checkpoint; returns (params dict, ModelConfig, meta dict)."""
    prefix = Path(prefix)
    bin_path = prefix.with_suffix(".bin")
    idx_path = prefix.with_suffix(".idx")
    if not idx_path.exists() or not bin_path.exists():
        raise ConfigError(f"checkpoint not found: expected {idx_path} and {bin_path}")
    lines = idx_path.read_text().splitlines()
    if not lines or lines[0] != FORMAT_TAG:
        raise ConfigError(f"{idx_path}: not a {FORMAT_TAG!r} file")
    raw = bin_path.read_bytes()
    cfg_kwargs, meta, params = {}, {}, {}
    by_name = {fld.name: fld for fld in fields(ModelConfig)}
    for line in lines[1:]:
        if not line.strip():
            continue
        kind, rest = line.split(" ", 1)
        if kind == "meta":
            key, val = rest.split("=", 1)
            meta[key] = val
        elif kind == "config":
            key, val = rest.split("=", 1)
            typ = by_name[key].type
            if typ in ("bool", bool):
                cfg_kwargs[key] = val == "True"
            elif typ in ("int", int):
                cfg_kwargs[key] = int(val)
            elif typ in ("float", float):
                cfg_kwargs[key] = float(val)
            else:
                cfg_kwargs[key] = val
        elif kind == "tensor":
            name, tag, shape, offset, size = rest.split(" ")
            shape = tuple(int(s) for s in shape.split(",")) if shape else ()
            offset, size = int(offset), int(size)
            dt = np.dtype(_DTYPE_TAGS[tag])
            arr = np.frombuffer(raw, dtype=dt, count=size, offset=offset)
            params[name] = arr.reshape(shape).astype(tag)
        else:
            raise ConfigError(f"{idx_path}: unknown index line {line!r}")
    return params, ModelConfig(**cfg_kwargs), meta
