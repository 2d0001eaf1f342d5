"""Single-file checkpoint container.

Layout: the 8-byte magic ``READCKPT``, a little-endian uint64 manifest
length, the UTF-8 JSON manifest, then one raw little-endian float64 blob per
parameter in manifest order. Each manifest entry stores the blob's shape,
byte offset (relative to the end of the manifest), size and SHA-256.
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import CheckpointError, ConfigError
from .model import ModelConfig, ReadModel, parameter_layout

FORMAT_VERSION = "read-ckpt-1"
MAGIC = b"READCKPT"
_LE_F64 = np.dtype("<f8")


@dataclass
class Checkpoint:
    model_config: ModelConfig
    state: "OrderedDict[str, np.ndarray]"
    train_config: dict[str, Any] = field(default_factory=dict)
    step: int = 0
    dev_metric: float | None = None
    epoch: int | None = None
    format_version: str = FORMAT_VERSION

    @classmethod
    def from_model(cls, model: ReadModel, **meta) -> "Checkpoint":
        return cls(model.config, model.state_dict(), **meta)

    def to_model(self) -> ReadModel:
        model = ReadModel.init(self.model_config, seed=0)
        model.load_state_dict(self.state)
        return model

    def manifest(self) -> dict:
        return {
            "format_version": self.format_version,
            "model_config": self.model_config.to_dict(),
            "train_config": self.train_config,
            "step": self.step,
            "epoch": self.epoch,
            "dev_metric": self.dev_metric,
        }


def save_checkpoint(obj: ReadModel | Checkpoint, path: str | Path) -> Path:
    ckpt = obj if isinstance(obj, Checkpoint) else Checkpoint.from_model(obj)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blobs, entries, offset = [], [], 0
    for name, arr in ckpt.state.items():
        raw = np.ascontiguousarray(arr, dtype=_LE_F64).tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
                "sha256": hashlib.sha256(raw).hexdigest(),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    manifest = ckpt.manifest()
    manifest["blobs"] = entries
    head = json.dumps(manifest, sort_keys=False).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)
    return path


def read_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (head_len,) = struct.unpack("<Q", raw[8:16])
    if 16 + head_len > len(raw):
        raise CheckpointError(f"{path}: manifest truncated")
    try:
        manifest = json.loads(raw[16 : 16 + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest ({exc})") from None
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version!r}, expected {FORMAT_VERSION!r}")
    try:
        config = ModelConfig.from_dict(manifest["model_config"])
    except (KeyError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"{path}: bad model config ({exc})") from None

    body = raw[16 + head_len :]
    by_name = {e["name"]: e for e in manifest.get("blobs", [])}
    state: OrderedDict[str, np.ndarray] = OrderedDict()
    for name, shape, _ in parameter_layout(config):
        entry = by_name.pop(name, None)
        if entry is None:
            raise CheckpointError(f"{path}: missing blob for parameter {name!r}")
        if tuple(entry["shape"]) != shape:
            raise CheckpointError(
                f"{path}: blob {name!r} has shape {tuple(entry['shape'])}, config implies {shape}"
            )
        start, size = entry["offset"], entry["nbytes"]
        chunk = body[start : start + size]
        if len(chunk) != size or hashlib.sha256(chunk).hexdigest() != entry["sha256"]:
            raise CheckpointError(f"{path}: checksum failure for blob {name!r}")
        state[name] = np.frombuffer(chunk, dtype=_LE_F64).astype(np.float64).reshape(shape)
    if by_name:
        raise CheckpointError(f"{path}: unexpected blobs {sorted(by_name)}")
    return Checkpoint(
        model_config=config,
        state=state,
        train_config=manifest.get("train_config") or {},
        step=int(manifest.get("step") or 0),
        dev_metric=manifest.get("dev_metric"),
        epoch=manifest.get("epoch"),
        format_version=version,
    )


def load_checkpoint(path: str | Path) -> ReadModel:
    return read_checkpoint(path).to_model()
