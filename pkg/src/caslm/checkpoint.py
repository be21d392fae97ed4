"""Checkpoint container.

Layout: the 8-byte magic ``CASLMCK1``, a little-endian uint64 header length,
the header as canonical JSON (descriptor, model config, parameter manifest of
name/shape/offset, free-form metadata), then the parameters as one
little-endian float64 payload. Offsets are in bytes from the payload start.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .architecture import ArchDescriptor, BaseWeights, LanguageModel, ModelConfig

MAGIC = b"CASLMCK1"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    descriptor: ArchDescriptor
    config: ModelConfig
    arrays: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def base_weights(self) -> BaseWeights:
        return BaseWeights(self.descriptor, self.config, self.arrays)

    def to_model(self, train_embeddings: bool = False) -> LanguageModel:
        model = LanguageModel(self.descriptor, self.config, np.random.default_rng(0))
        names = set()
        for name, p in model.named_parameters():
            if name not in self.arrays:
                raise CheckpointError(f"checkpoint lacks parameter {name}")
            if self.arrays[name].shape != p.shape:
                raise CheckpointError(
                    f"{name}: stored shape {self.arrays[name].shape}, model expects {p.shape}"
                )
            p.data = self.arrays[name].copy()
            names.add(name)
        extra = set(self.arrays) - names
        if extra:
            raise CheckpointError(f"checkpoint has unexpected parameters {sorted(extra)}")
        model.set_trainable(train_embeddings)
        return model


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_checkpoint(
    path: str | Path,
    descriptor: ArchDescriptor,
    config: ModelConfig,
    arrays: Mapping[str, np.ndarray],
    meta: Mapping | None = None,
) -> None:
    manifest = []
    offset = 0
    chunks = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = canonical_json(
        {
            "version": VERSION,
            "descriptor": descriptor.to_dict(),
            "model_config": config.to_dict(),
            "params": manifest,
            "payload_bytes": offset,
            "meta": dict(meta or {}),
        }
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for chunk in chunks:
            fh.write(chunk)


def save_model(path: str | Path, model: LanguageModel, meta: Mapping | None = None) -> None:
    save_checkpoint(path, model.descriptor, model.config, model.state_arrays(), meta)


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (size,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + size].decode("utf-8"))
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    payload = raw[16 + size :]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(f"{path}: payload truncated")
    arrays = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=entry["offset"])
        arrays[entry["name"]] = arr.reshape(shape).astype(np.float64)
    return Checkpoint(
        ArchDescriptor.from_dict(header["descriptor"]),
        ModelConfig(**header["model_config"]),
        arrays,
        header.get("meta", {}),
    )
