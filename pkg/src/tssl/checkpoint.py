"""Binary checkpoint format.

Layout (little-endian)::

    b"LWTS" | version u32 | sha256(model config) 32 bytes | meta_len u32 | meta JSON
    | n_records u32 | records...

    record: flags u8 (bit 0 = read-only) | name_len u16 | name utf-8 | ndim u8
            | dims u32 * ndim | float32 values, row-major
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Dict, Iterable, Optional, Tuple

import numpy as np
import torch
from torch import nn

from .model import EncoderModel, ModelConfig

MAGIC = b"LWTS"
VERSION = 1
READ_ONLY = 1


class CheckpointError(ValueError):
    pass


def _config_digest(model_cfg: dict) -> bytes:
    blob = json.dumps(model_cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).digest()


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def module_state(module: nn.Module, prefix: str = "") -> Dict[str, torch.Tensor]:
    """Named parameters followed by named buffers, in registration order."""
    out = {prefix + n: p for n, p in module.named_parameters()}
    out.update({prefix + n: b for n, b in module.named_buffers()})
    return out


def save(path, meta: dict, records: Iterable[Tuple[str, torch.Tensor, bool]]) -> None:
    if "model" not in meta:
        raise CheckpointError("meta must carry the model config")
    meta_blob = json.dumps(meta, sort_keys=True).encode()
    records = list(records)
    parts = [
        MAGIC,
        struct.pack("<I", VERSION),
        _config_digest(meta["model"]),
        struct.pack("<I", len(meta_blob)),
        meta_blob,
        struct.pack("<I", len(records)),
    ]
    for name, tensor, read_only in records:
        name_b = name.encode()
        arr = tensor.detach().cpu().numpy().astype("<f4")
        parts.append(struct.pack("<BH", READ_ONLY if read_only else 0, len(name_b)))
        parts.append(name_b)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load(path) -> Tuple[dict, Dict[str, Tuple[np.ndarray, bool]]]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    digest = raw[8:40]
    (meta_len,) = struct.unpack_from("<I", raw, 40)
    off = 44
    meta = json.loads(raw[off : off + meta_len])
    off += meta_len
    if _config_digest(meta["model"]) != digest:
        raise CheckpointError(f"{path}: config digest mismatch")
    (n,) = struct.unpack_from("<I", raw, off)
    off += 4
    records = {}
    for _ in range(n):
        flags, name_len = struct.unpack_from("<BH", raw, off)
        off += 3
        name = raw[off : off + name_len].decode()
        off += name_len
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
        records[name] = (arr.copy(), bool(flags & READ_ONLY))
    return meta, records


def fill_module(module: nn.Module, records: Dict[str, Tuple[np.ndarray, bool]], prefix: str = "",
                strict: bool = True) -> None:
    """Copy ``prefix``-named records into ``module``'s parameters and buffers."""
    state = module_state(module)
    with torch.no_grad():
        for name, tensor in state.items():
            key = prefix + name
            if key not in records:
                if strict:
                    raise CheckpointError(f"checkpoint lacks {key}")
                continue
            arr = records[key][0]
            if tuple(arr.shape) != tuple(tensor.shape):
                raise CheckpointError(f"{key}: shape {arr.shape} != {tuple(tensor.shape)}")
            tensor.copy_(torch.from_numpy(arr).to(tensor.dtype))


def save_model(path, model: EncoderModel, extra: Optional[dict] = None) -> None:
    meta = {"kind": "encoder", "model": model.cfg.to_dict(), **(extra or {})}
    save(path, meta, ((n, t, False) for n, t in module_state(model).items()))


def load_model(path, expect: Optional[ModelConfig] = None, dtype=torch.float32,
               **overrides) -> Tuple[EncoderModel, dict]:
    """Rebuild an EncoderModel; ``overrides`` adjust heads (e.g. classifier_classes)."""
    meta, records = load(path)
    cfg = ModelConfig.from_dict(meta["model"])
    if expect is not None and expect.digest() != cfg.digest():
        raise CheckpointError(f"{path}: checkpoint/config mismatch")
    prefix = "lwt1." if meta.get("kind") == "uwdb" else ""
    if overrides:
        cfg = ModelConfig.from_dict({**cfg.to_dict(), **overrides})
    model = EncoderModel(cfg).to(dtype)
    fill_module(model, records, prefix, strict=False)
    missing = [n for n in module_state(model) if prefix + n not in records
               and not any(n.startswith(h) for h in ("classifier.", "quant."))]
    if missing:
        raise CheckpointError(f"{path}: checkpoint lacks {missing[:3]}")
    return model, meta
