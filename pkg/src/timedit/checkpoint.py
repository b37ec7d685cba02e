"""Single-file checkpoints: magic, manifest length, JSON manifest, raw little-endian arrays.

Layout::

    b"TDCKPT\\x00\\x01"  | uint64 LE manifest length | manifest JSON (utf-8) | tensor bytes

The manifest records the format version, the model config, and per-tensor
name/dtype/shape/offset/nbytes relative to the start of the tensor block.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .model import DenoiserModel, ModelConfig

FORMAT = "timedit-ckpt-v1"
MAGIC = b"TDCKPT\x00\x01"


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: DenoiserModel, path, extra: dict | None = None) -> Path:
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name, t in model.state_dict().items():
        a = t.detach().cpu().numpy()
        a = np.ascontiguousarray(a.astype(a.dtype.newbyteorder("<")))
        raw = a.tobytes()
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset,
                        "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = {"format": FORMAT, "config": model.config.to_dict(), "tensors": entries, "extra": extra or {}}
    head = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)
    return path


def read_manifest(path) -> tuple[dict, bytes]:
    data = Path(path).read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a timedit checkpoint")
    if len(data) < len(MAGIC) + 8:
        raise CheckpointError(f"{path}: truncated header")
    (n,) = struct.unpack("<Q", data[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    if len(data) < start + n:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(data[start:start + n])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from None
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path}: format {manifest.get('format')!r}, expected {FORMAT!r}")
    return manifest, data[start + n:]


def load_checkpoint(path, expect: ModelConfig | None = None) -> tuple[DenoiserModel, dict]:
    """Rebuild the model; ``expect`` guards against a checkpoint trained for another shape."""
    manifest, body = read_manifest(path)
    cfg = ModelConfig.from_dict(manifest["config"])
    if expect is not None:
        for key in ("L_max", "K_max", "d_model", "n_blocks", "n_heads", "conditioning", "attention", "mask_channel"):
            if getattr(expect, key) != getattr(cfg, key):
                raise CheckpointError(
                    f"{path}: checkpoint {key}={getattr(cfg, key)!r} but config asks for {getattr(expect, key)!r}")
    model = DenoiserModel(cfg)
    own = model.state_dict()
    state = {}
    for e in manifest["tensors"]:
        name = e["name"]
        if name not in own:
            raise CheckpointError(f"{path}: unexpected tensor {name}")
        end = e["offset"] + e["nbytes"]
        if end > len(body):
            raise CheckpointError(f"{path}: truncated tensor data at {name}")
        a = np.frombuffer(body[e["offset"]:end], dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        if tuple(a.shape) != tuple(own[name].shape):
            raise CheckpointError(f"{path}: {name} has shape {tuple(a.shape)}, model expects {tuple(own[name].shape)}")
        state[name] = torch.from_numpy(a.astype(a.dtype.newbyteorder("="))).to(own[name].dtype)
    missing = set(own) - set(state)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)}")
    model.load_state_dict(state)
    model.eval()
    return model, manifest.get("extra", {})
