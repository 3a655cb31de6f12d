"""Checkpoint serialization: config echo, step count, named parameter blobs.

Binary layout (all little-endian):

    magic "FVCP" | u32 version
    u32 config_len | config text (flat key=value, echoes the RunConfig)
    u64 step
    u32 n_blobs
    per blob: u16 name_len | name utf-8 | u8 dtype | u8 ndim | u32 dims...
              | u64 payload_len | raw bytes

Blob names: ``model.<param>`` for parameters, ``adam.<param>.exp_avg`` /
``.exp_avg_sq`` / ``.step`` for optimizer moments, ``rng.train`` for the
training generator state. Restoring every blob reproduces training
bit-exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, config_from_text
from .data import FormatError

MAGIC = b"FVCP"
VERSION = 1

_DTYPE_TO_TAG = {np.dtype("<f4"): 0, np.dtype("u1"): 1, np.dtype("<i8"): 2, np.dtype("<f8"): 3}
_TAG_TO_DTYPE = {v: k for k, v in _DTYPE_TO_TAG.items()}


@dataclass
class Checkpoint:
    config: RunConfig
    step: int
    blobs: dict[str, np.ndarray]

    def tensors(self, prefix: str) -> dict[str, torch.Tensor]:
        """Blobs under ``prefix.`` as torch tensors, prefix stripped."""
        out = {}
        for name, arr in self.blobs.items():
            if name.startswith(prefix + "."):
                out[name[len(prefix) + 1:]] = torch.from_numpy(arr.copy())
        return out


def _to_array(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    arr = np.asarray(value)
    if arr.dtype == np.float32:
        return arr.astype("<f4", copy=False)
    if arr.dtype == np.uint8:
        return arr
    if arr.dtype in (np.int64, np.int32):
        return arr.astype("<i8")
    if arr.dtype == np.float64:
        return arr.astype("<f8", copy=False)
    raise TypeError(f"unsupported blob dtype {arr.dtype}")


def save_checkpoint(path: str | Path, config: RunConfig, step: int, blobs: dict) -> None:
    text = config.to_text().encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(text)))
        f.write(text)
        f.write(struct.pack("<Q", step))
        f.write(struct.pack("<I", len(blobs)))
        for name, value in blobs.items():
            arr = np.ascontiguousarray(_to_array(value))
            raw = arr.tobytes()
            name_b = name.encode()
            f.write(struct.pack("<H", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<BB", _DTYPE_TO_TAG[arr.dtype], arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(struct.pack("<Q", len(raw)))
            f.write(raw)


def load_checkpoint(path: str | Path, expected_config: RunConfig | None = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(raw):
            raise FormatError(f"{path}: truncated checkpoint")
        chunk = raw[off:off + n]
        off += n
        return chunk

    if take(4) != MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (config_len,) = struct.unpack("<I", take(4))
    config = config_from_text(take(config_len).decode())
    (step,) = struct.unpack("<Q", take(8))
    (n_blobs,) = struct.unpack("<I", take(4))
    blobs: dict[str, np.ndarray] = {}
    for _ in range(n_blobs):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode()
        tag, ndim = struct.unpack("<BB", take(2))
        if tag not in _TAG_TO_DTYPE:
            raise FormatError(f"{path}: unknown blob dtype tag {tag}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        (nbytes,) = struct.unpack("<Q", take(8))
        dtype = _TAG_TO_DTYPE[tag]
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if nbytes != expected:
            raise FormatError(f"{path}: blob {name!r} payload {nbytes} != shape {shape}")
        blobs[name] = np.frombuffer(take(nbytes), dtype=dtype).reshape(shape).copy()
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    if expected_config is not None and config != expected_config:
        raise FormatError(f"{path}: checkpoint config does not match the requested config")
    return Checkpoint(config, step, blobs)


def module_blobs(module: torch.nn.Module, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


def load_module(module: torch.nn.Module, ckpt: Checkpoint, prefix: str) -> None:
    """Restore a module from the checkpoint, validating shape agreement."""
    state = ckpt.tensors(prefix)
    own = module.state_dict()
    if set(state) != set(own):
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        raise FormatError(f"checkpoint/model mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
    for k, v in state.items():
        if tuple(v.shape) != tuple(own[k].shape):
            raise FormatError(f"blob {prefix}.{k}: shape {tuple(v.shape)} != model {tuple(own[k].shape)}")
    module.load_state_dict(state)


def optimizer_blobs(opt: torch.optim.Optimizer, names: list[str]) -> dict[str, np.ndarray]:
    """Adam moments as named blobs; ``names`` orders params as in the optimizer."""
    out = {}
    params = [p for g in opt.param_groups for p in g["params"]]
    for name, p in zip(names, params):
        state = opt.state.get(p)
        if not state:
            continue
        out[f"adam.{name}.step"] = np.asarray(float(state["step"]), dtype="<f8")
        out[f"adam.{name}.exp_avg"] = state["exp_avg"]
        out[f"adam.{name}.exp_avg_sq"] = state["exp_avg_sq"]
    return out


def load_optimizer(opt: torch.optim.Optimizer, names: list[str], ckpt: Checkpoint) -> None:
    params = [p for g in opt.param_groups for p in g["params"]]
    for name, p in zip(names, params):
        key = f"adam.{name}.step"
        if key not in ckpt.blobs:
            continue
        opt.state[p] = {
            "step": torch.tensor(float(ckpt.blobs[key])),
            "exp_avg": torch.from_numpy(ckpt.blobs[f"adam.{name}.exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(ckpt.blobs[f"adam.{name}.exp_avg_sq"].copy()),
        }
