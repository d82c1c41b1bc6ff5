"""Single-file checkpoints: magic header, JSON manifest, raw little-endian float32 blobs.

Layout::

    b"PHYT0001" | uint32 LE manifest length | manifest (UTF-8 JSON) | blobs

The manifest holds ``tensors`` (ordered list of name/shape/dtype) and free-form
``meta`` (the model config lives there). Blobs follow in manifest order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"PHYT0001"


class CheckpointError(ValueError):
    pass


def save_state(state: dict[str, torch.Tensor], path: str | Path, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, blobs = [], []
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy().astype("<f4", copy=False)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32"})
        blobs.append(np.ascontiguousarray(arr).tobytes())
    manifest = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)
    return path


def load_state(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic header {raw[:8]!r}")
    (n,) = struct.unpack("<I", raw[8:12])
    manifest = json.loads(raw[12 : 12 + n].decode("utf-8"))
    pos = 12 + n
    state = {}
    for entry in manifest["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        nbytes = 4 * count
        if pos + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated blob for {entry['name']}")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
        pos += nbytes
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return state, manifest.get("meta", {})


def manifest_diff(expected: dict[str, torch.Tensor], found: dict[str, torch.Tensor]) -> list[str]:
    lines = []
    for name in sorted(set(expected) | set(found)):
        if name not in found:
            lines.append(f"missing: {name} {tuple(expected[name].shape)}")
        elif name not in expected:
            lines.append(f"unexpected: {name} {tuple(found[name].shape)}")
        elif tuple(expected[name].shape) != tuple(found[name].shape):
            lines.append(f"shape: {name} expected {tuple(expected[name].shape)} got {tuple(found[name].shape)}")
    return lines


def save_model(model, path: str | Path, extra_meta: dict | None = None) -> Path:
    meta = {"model": model.config.to_dict()}
    meta.update(extra_meta or {})
    state = {k: v.float() for k, v in model.state_dict().items() if v.is_floating_point()}
    return save_state(state, path, meta)


def load_model(path: str | Path, expected_config=None):
    from .model import ModelConfig, PhyTrackerNet

    state, meta = load_state(path)
    if expected_config is None:
        try:
            expected_config = ModelConfig.from_dict(meta["model"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"{path}: missing or invalid model configuration ({exc})") from None
    cfg = expected_config
    model = PhyTrackerNet(cfg)
    own = {k: v for k, v in model.state_dict().items() if v.is_floating_point()}
    diff = manifest_diff(own, state)
    if diff:
        raise CheckpointError("checkpoint does not match model:\n  " + "\n  ".join(diff))
    model.load_state_dict(state, strict=False)
    model.eval()
    return model, meta
