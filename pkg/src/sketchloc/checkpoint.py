"""Versioned binary checkpoint container.

Layout (all integers little-endian):
    magic   "SGOL" (4 bytes)
    version u32
    digest  u16 length + utf-8 config digest
    meta    u32 length + utf-8 JSON (stage, epoch, categories, ...)
    params  u32 count, then per entry:
              u16 name length + utf-8 name
              u8  shape rank, u32 dims * rank
              raw little-endian float32 payload
    state   u32 count + entries in the same encoding (optimizer velocities)
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"SGOL"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class CheckpointData:
    digest: str
    meta: dict
    params: dict[str, np.ndarray]
    velocities: dict[str, np.ndarray] = field(default_factory=dict)


def _write_entry(fh, name: str, array: np.ndarray):
    name_b = name.encode("utf-8")
    arr = np.ascontiguousarray(array, dtype="<f4")
    fh.write(struct.pack("<H", len(name_b)))
    fh.write(name_b)
    fh.write(struct.pack("<B", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())


def _read_entry(fh) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", fh.read(2))
    name = fh.read(name_len).decode("utf-8")
    (rank,) = struct.unpack("<B", fh.read(1))
    dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
    count = int(np.prod(dims)) if dims else 1
    data = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(dims)
    return name, data


def save_checkpoint(model, path, optimizer_state: dict[str, torch.Tensor] | None = None,
                    meta: dict | None = None):
    """Write the model's full parameter registry (and optional optimizer
    velocity buffers) to ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = [(name, p.detach().cpu().numpy()) for name, p in model.registry()]
    state = optimizer_state or {}
    meta = dict(meta or {})
    meta.setdefault("with_attention", model.config.with_attention)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        digest_b = model.config.digest().encode("utf-8")
        fh.write(struct.pack("<H", len(digest_b)))
        fh.write(digest_b)
        meta_b = json.dumps(meta, sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<I", len(meta_b)))
        fh.write(meta_b)
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            _write_entry(fh, name, arr)
        fh.write(struct.pack("<I", len(state)))
        for name, buf in state.items():
            _write_entry(fh, name, buf.detach().cpu().numpy())


def load_checkpoint(path) -> CheckpointData:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (dlen,) = struct.unpack("<H", fh.read(2))
        digest = fh.read(dlen).decode("utf-8")
        (mlen,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(mlen).decode("utf-8"))
        (n_params,) = struct.unpack("<I", fh.read(4))
        params = dict(_read_entry(fh) for _ in range(n_params))
        (n_state,) = struct.unpack("<I", fh.read(4))
        velocities = dict(_read_entry(fh) for _ in range(n_state))
    return CheckpointData(digest=digest, meta=meta, params=params, velocities=velocities)


def restore(model, ckpt: CheckpointData, strict: bool = True) -> list[str]:
    """Copy checkpoint parameters into the model, verifying the config digest.

    With strict=True the checkpoint must cover the registry exactly. With
    strict=False, registry entries missing from the checkpoint keep their
    fresh initialization (the incremental stage-1 -> stage-2 path); the list
    of such names is returned.
    """
    model_digest = model.config.digest()
    if ckpt.digest != model_digest:
        raise CheckpointError(
            f"config digest mismatch: checkpoint {ckpt.digest} vs model {model_digest}")
    registry = dict(model.registry())
    extra = set(ckpt.params) - set(registry)
    if extra:
        raise CheckpointError(f"checkpoint has parameters unknown to the model: {sorted(extra)}")
    missing = [name for name in registry if name not in ckpt.params]
    if strict and missing:
        raise CheckpointError(f"checkpoint is missing parameters: {missing}")
    with torch.no_grad():
        for name, arr in ckpt.params.items():
            param = registry[name]
            if tuple(param.shape) != arr.shape:
                raise CheckpointError(
                    f"shape mismatch for {name}: checkpoint {arr.shape} vs model "
                    f"{tuple(param.shape)}")
            param.copy_(torch.from_numpy(arr.copy()).to(param.dtype))
    return missing
