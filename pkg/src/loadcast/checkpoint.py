"""Versioned binary checkpoint container.

Layout: ``b"LDCK"`` magic, u32 version, u64 header length, a UTF-8 JSON
header, the raw little-endian float64 parameter blocks in the order listed
by the header, and a trailing SHA-256 digest of everything before it.
Serialization is canonical (sorted keys, sorted block names), so
save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import __version__ as _app_version
from .data import NormStats
from .errors import CheckpointError
from .model import ModelConfig, ModelParams
from .nn import BatchNormState
from .optim import AdamState
from .tensor import Tensor

MAGIC = b"LDCK"
VERSION = 1


@dataclass
class Checkpoint:
    """Everything needed to resume or serve a training run."""

    params: ModelParams
    stats: NormStats | None
    seed: int
    epochs: dict[str, int] = field(default_factory=lambda: {"stage1": 0, "stage2": 0})
    loss_history: dict[str, list[float]] = field(
        default_factory=lambda: {"stage1": [], "stage2": []})
    adam1: AdamState | None = None
    adam2: AdamState | None = None
    schedules: dict | None = None


def _adam_header(state: AdamState | None) -> dict | None:
    if state is None:
        return None
    return {"lr": state.lr, "beta1": state.beta1, "beta2": state.beta2,
            "eps": state.eps, "t": state.t}


def _collect_blocks(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    blocks: dict[str, np.ndarray] = {}
    for name, tensor in ckpt.params.tensors.items():
        blocks[f"param:{name}"] = tensor.data
    for name, state in ckpt.params.bn.items():
        blocks[f"bn:{name}:mean"] = state.running_mean
        blocks[f"bn:{name}:var"] = state.running_var
    for label, state in (("adam1", ckpt.adam1), ("adam2", ckpt.adam2)):
        if state is None:
            continue
        for pname, m in state.m.items():
            blocks[f"{label}:m:{pname}"] = m
        for pname, v in state.v.items():
            blocks[f"{label}:v:{pname}"] = v
    return blocks


def serialize_checkpoint(ckpt: Checkpoint) -> bytes:
    blocks = _collect_blocks(ckpt)
    names = sorted(blocks)
    header = {
        "app_version": _app_version,
        "config": ckpt.params.config.to_dict(),
        "stage2_trained": ckpt.params.stage2_trained,
        "bn_meta": {name: [state.momentum, state.eps]
                    for name, state in sorted(ckpt.params.bn.items())},
        "seed": ckpt.seed,
        "epochs": ckpt.epochs,
        "loss_history": ckpt.loss_history,
        "adam1": _adam_header(ckpt.adam1),
        "adam2": _adam_header(ckpt.adam2),
        "norm_stats": None if ckpt.stats is None else ckpt.stats.to_dict(),
        "schedules": ckpt.schedules,
        "blocks": [[name, list(blocks[name].shape)] for name in names],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(header_bytes)),
             header_bytes]
    for name in names:
        parts.append(np.ascontiguousarray(blocks[name], dtype="<f8").tobytes())
    payload = b"".join(parts)
    return payload + hashlib.sha256(payload).digest()


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    """Write atomically: the file either has the full verified content or
    the previous content, never a partial mix."""
    data = serialize_checkpoint(ckpt)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) + 4 + 8 + 32:
        raise CheckpointError(f"{path}: file too short to be a checkpoint")
    payload, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated)")
    if payload[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    (version,) = struct.unpack("<I", payload[4:8])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<Q", payload[8:16])
    header = json.loads(payload[16:16 + hlen].decode("utf-8"))

    offset = 16 + hlen
    arrays: dict[str, np.ndarray] = {}
    for name, shape in header["blocks"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
        arrays[name] = arr.reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError(f"{path}: trailing bytes after parameter blocks")

    config = ModelConfig.from_dict(header["config"])
    params = ModelParams(config)
    params.stage2_trained = bool(header["stage2_trained"])
    for name, arr in arrays.items():
        if name.startswith("param:"):
            params.tensors[name[len("param:"):]] = Tensor(arr, requires_grad=True)
    for bn_name, (momentum, eps) in header["bn_meta"].items():
        params.bn[bn_name] = BatchNormState(
            arrays[f"bn:{bn_name}:mean"].copy(), arrays[f"bn:{bn_name}:var"].copy(),
            momentum, eps)

    def restore_adam(label: str) -> AdamState | None:
        meta = header[label]
        if meta is None:
            return None
        state = AdamState(lr=meta["lr"], beta1=meta["beta1"], beta2=meta["beta2"],
                          eps=meta["eps"], t=meta["t"])
        for name, arr in arrays.items():
            if name.startswith(f"{label}:m:"):
                state.m[name.split(":", 2)[2]] = arr.copy()
            elif name.startswith(f"{label}:v:"):
                state.v[name.split(":", 2)[2]] = arr.copy()
        return state

    stats = (None if header["norm_stats"] is None
             else NormStats.from_dict(header["norm_stats"]))
    return Checkpoint(params=params, stats=stats, seed=header["seed"],
                      epochs=header["epochs"], loss_history=header["loss_history"],
                      adam1=restore_adam("adam1"), adam2=restore_adam("adam2"),
                      schedules=header["schedules"])
