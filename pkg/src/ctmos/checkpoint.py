"""Binary checkpoint format.

Layout, all integers little-endian::

    b"CTMS"  u32 version
    u32 n    n bytes of UTF-8 JSON (configs, optimizer state, epoch, best ppl)
    u32 count
    count x { u16 name_len, name, u8 ndim, ndim x u32 dim, float32 data }
    u64      FNV-1a digest of the vocabulary

Parameters are stored as float32, so a checkpoint holds float32 arrays and
round-trips them bit for bit.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (CheckpointDigestError, CheckpointFormatError, CheckpointTruncatedError,
                     CheckpointVersionError)
from .model import CTMoSModel, MoSConfig, TemperatureConfig

MAGIC = b"CTMS"
VERSION = 1


@dataclass
class Checkpoint:
    model: dict
    temperature: dict
    params: dict
    vocab_digest: int
    optimizer: dict = field(default_factory=dict)
    epoch: int = 0
    best_valid_ppl: float = float("inf")
    version: int = VERSION

    def __post_init__(self):
        self.params = {k: np.asarray(v, dtype="<f4") for k, v in self.params.items()}

    @classmethod
    def from_model(cls, model: CTMoSModel, vocab_digest: int, optimizer=None,
                   epoch: int = 0, best_valid_ppl: float = float("inf")) -> "Checkpoint":
        d = model.describe()
        return cls(d["model"], d["temperature"], dict(model.params), vocab_digest,
                   dict(optimizer or {}), epoch, best_valid_ppl)

    def to_model(self) -> CTMoSModel:
        mcfg = dict(self.model)
        mcfg["layer_sizes"] = tuple(mcfg["layer_sizes"])
        return CTMoSModel(MoSConfig(**mcfg), TemperatureConfig(**self.temperature),
                          {k: v.astype(np.float64) for k, v in self.params.items()})


def encode(ckpt: Checkpoint) -> bytes:
    meta = json.dumps({"model": ckpt.model, "temperature": ckpt.temperature,
                       "optimizer": ckpt.optimizer, "epoch": ckpt.epoch,
                       "best_valid_ppl": ckpt.best_valid_ppl}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", ckpt.version), struct.pack("<I", len(meta)), meta,
             struct.pack("<I", len(ckpt.params))]
    for name in sorted(ckpt.params):
        arr = ckpt.params[name]
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    parts.append(struct.pack("<Q", ckpt.vocab_digest))
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(
                f"checkpoint truncated at byte {len(self.data)} (needed {self.pos + n})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(data: bytes, expected_digest: int | None = None) -> Checkpoint:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointFormatError("not a CTMS checkpoint")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {VERSION}")
    (n,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(n).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"corrupt metadata block: {exc}") from None
    (count,) = r.unpack("<I")
    params = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).copy()
    (digest,) = r.unpack("<Q")
    if r.pos != len(data):
        raise CheckpointFormatError(f"{len(data) - r.pos} trailing bytes after checkpoint")
    if expected_digest is not None and digest != expected_digest:
        raise CheckpointDigestError(
            f"vocabulary digest {digest:016x} does not match {expected_digest:016x}")
    return Checkpoint(meta["model"], meta["temperature"], params, digest, meta["optimizer"],
                      meta["epoch"], meta["best_valid_ppl"], version)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(encode(ckpt))


def load_checkpoint(path, expected_digest: int | None = None) -> Checkpoint:
    return decode(Path(path).read_bytes(), expected_digest)
