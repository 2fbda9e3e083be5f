"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"EXOTST01"
    u32  tensor count
    per tensor: u16 name length, UTF-8 name, u8 rank, rank x u32 dims,
                row-major float32 values
    config as UTF-8 ``key=value`` lines

Batch-norm running statistics are stored as ordinary tensors named
``<norm>.running_mean`` / ``<norm>.running_var``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointCompatibilityError, CheckpointError
from .model import ExoTSTConfig, ExoTSTModel, init_model

MAGIC = b"EXOTST01"


def model_state(model: ExoTSTModel):
    """Ordered name -> array mapping of everything a checkpoint stores."""
    state = {name: p.data for name, p in model.parameters().items()}
    for name, norm in model.norms().items():
        state[f"{name}.running_mean"] = norm.running_mean
        state[f"{name}.running_var"] = norm.running_var
    return state


def encode(model: ExoTSTModel) -> bytes:
    state = model_state(model)
    parts = [MAGIC, struct.pack("<I", len(state))]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    parts.append("".join(line + "\n" for line in model.cfg.to_lines()).encode("utf-8"))
    return b"".join(parts)


def save_checkpoint(model: ExoTSTModel, path):
    Path(path).write_bytes(encode(model))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes):
    """Parse checkpoint bytes into (tensors, config)."""
    r = _Reader(buf)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("bad magic bytes, not an EXOTST01 checkpoint", 0)
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "name length")
        at = r.pos
        try:
            name = r.take(nlen, "tensor name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError("tensor name is not valid UTF-8", at) from None
        (rank,) = r.unpack("<B", f"rank of {name}")
        dims = r.unpack(f"<{rank}I", f"dims of {name}") if rank else ()
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        raw = r.take(4 * n, f"values of {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(dims)
    at = r.pos
    try:
        text = buf[r.pos:].decode("utf-8")
    except UnicodeDecodeError:
        raise CheckpointError("config section is not valid UTF-8", at) from None
    mapping = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        if "=" not in line:
            raise CheckpointError(f"malformed config line {line!r}", at)
        k, v = line.split("=", 1)
        mapping[k.strip()] = v.strip()
    try:
        cfg = ExoTSTConfig.from_mapping(mapping)
    except Exception as exc:
        raise CheckpointError(f"invalid config section: {exc}", at) from None
    return tensors, cfg


def load_checkpoint(path, expected: ExoTSTConfig | None = None) -> ExoTSTModel:
    """Rebuild a model from ``path``, validating shapes and architecture."""
    tensors, cfg = decode(Path(path).read_bytes())
    if expected is not None:
        diffs = [f"{k}: file={getattr(cfg, k)!r} requested={getattr(expected, k)!r}"
                 for k in ExoTSTConfig.ARCHITECTURE if getattr(cfg, k) != getattr(expected, k)]
        if diffs:
            raise CheckpointCompatibilityError("checkpoint architecture mismatch: " + "; ".join(diffs))
    model = init_model(cfg)
    want = model_state(model)
    missing = set(want) - set(tensors)
    extra = set(tensors) - set(want)
    if missing or extra:
        raise CheckpointCompatibilityError(
            f"tensor set mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
    params = model.parameters()
    norms = model.norms()
    for name, arr in tensors.items():
        if arr.shape != want[name].shape:
            raise CheckpointCompatibilityError(
                f"tensor {name!r} has shape {arr.shape}, expected {want[name].shape}")
        if name in params:
            params[name].data[...] = arr
        else:
            norm_name, stat = name.rsplit(".", 1)
            setattr(norms[norm_name], stat, arr.copy())
    return model
