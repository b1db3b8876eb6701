"""Binary checkpoint container.

Layout: 8-byte magic, little-endian uint32 header length, UTF-8 JSON header,
then every named array as contiguous little-endian float32 in header order.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .model import FoundationModel, ModelConfig, heads_for

MAGIC = b"ECGFCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    method: Optional[str]
    seed: int
    arrays: dict[str, np.ndarray]
    step: int = 0
    history: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: FoundationModel, method: Optional[str], seed: int, step: int = 0,
                   history: Optional[dict] = None, **meta) -> "Checkpoint":
        arrays = {k: v.detach().cpu().numpy().astype(np.float32)
                  for k, v in model.state_dict().items()}
        return cls(model.config, method, seed, arrays, step, history or {}, meta)

    def build(self, dtype=torch.float32) -> FoundationModel:
        decoder, projection = heads_for(self.method)
        model = FoundationModel(self.config, decoder=decoder, projection=projection)
        state = {k: torch.from_numpy(v.copy()) for k, v in self.arrays.items()}
        model.load_state_dict(state)
        return model.to(dtype)

    def content_hash(self) -> str:
        h = hashlib.sha256(_header_bytes(self, with_offsets=False))
        for name in sorted(self.arrays):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.arrays[name], dtype="<f4").tobytes())
        return h.hexdigest()[:16]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (self.config == other.config and self.method == other.method
                and self.seed == other.seed and self.step == other.step
                and self.arrays.keys() == other.arrays.keys()
                and all(np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays))


def _header_bytes(ckpt: Checkpoint, with_offsets: bool = True) -> bytes:
    entries, offset = [], 0
    for name, arr in ckpt.arrays.items():
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset if with_offsets else None})
        offset += int(arr.size)
    header = {
        "version": VERSION,
        "config": ckpt.config.to_dict(),
        "method": ckpt.method,
        "seed": ckpt.seed,
        "step": ckpt.step,
        "history": ckpt.history,
        "meta": ckpt.meta,
        "arrays": entries,
    }
    return json.dumps(header, sort_keys=True).encode()


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = _header_bytes(ckpt)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for arr in ckpt.arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return path


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", raw[8:12])
    try:
        header = json.loads(raw[12:12 + hlen])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')!r}")
    body = np.frombuffer(raw, dtype="<f4", offset=12 + hlen)
    arrays = {}
    for e in header["arrays"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        chunk = body[e["offset"]: e["offset"] + n]
        if chunk.size != n:
            raise CheckpointError(f"{path}: truncated array {e['name']}")
        arrays[e["name"]] = chunk.reshape(e["shape"]).astype(np.float32)
    return Checkpoint(ModelConfig.from_dict(header["config"]), header["method"], header["seed"],
                      arrays, header["step"], header.get("history", {}), header.get("meta", {}))
