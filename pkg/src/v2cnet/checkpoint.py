"""Binary checkpoint files.

Layout (little-endian)::

    b"V2C1"
    u32 length + UTF-8 JSON header (config, vocabulary, classes, epoch,
        shuffle RNG state, optimizer hyperparameters and step counts)
    u32 count, then tensor records
    u32 count, then optimizer records

A record is ``u32 name length, UTF-8 name, u32 rank, rank x u32 dims,
float64 values``. Optimizer records are named ``m/<param>`` and ``v/<param>``.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .data import Vocabulary
from .model import Checkpoint, ModelConfig, V2CNet
from .numerics import Adam

MAGIC = b"V2C1"
FORMAT_VERSION = 1
MEAN_FRAME = "mean_frame"


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class UnknownTensorError(CheckpointError):
    pass


def _record(name: str, value: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    value = np.asarray(value, dtype="<f8")
    parts = [struct.pack("<I", len(raw)), raw, struct.pack("<I", value.ndim)]
    parts.append(struct.pack(f"<{value.ndim}I", *value.shape))
    parts.append(np.ascontiguousarray(value).tobytes())
    return b"".join(parts)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    model, opt = ckpt.model, ckpt.optimizer
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "vocab": model.vocab.words,
        "classes": model.classes,
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "optimizer": {
            "lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps,
            "step_counts": {k: s.step_count for k, s in opt.states.items()},
        },
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tensors = [(MEAN_FRAME, model.mean_frame)]
    tensors += [(k, p.value) for k, p in model.parameters().items()]
    opt_records = []
    for k, s in opt.states.items():
        opt_records += [(f"m/{k}", s.first_moment), (f"v/{k}", s.second_moment)]
    out = [MAGIC, struct.pack("<I", len(blob)), blob, struct.pack("<I", len(tensors))]
    out += [_record(k, v) for k, v in tensors]
    out.append(struct.pack("<I", len(opt_records)))
    out += [_record(k, v) for k, v in opt_records]
    return b"".join(out)


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


class _Reader:
    def __init__(self, blob: bytes, source):
        self.blob = blob
        self.pos = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointTruncatedError(f"{self.source}: file ends early at byte {len(self.blob)}")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def record(self) -> tuple[str, np.ndarray]:
        name = self.take(self.u32()).decode("utf-8")
        rank = self.u32()
        dims = struct.unpack(f"<{rank}I", self.take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)
        return name, values.reshape(dims)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic {blob[:4]!r})")
    r = _Reader(blob, path)
    r.take(4)
    try:
        header = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {header.get('format_version')}, expected {FORMAT_VERSION}")
    tensors = dict(r.record() for _ in range(r.u32()))
    opt_records = dict(r.record() for _ in range(r.u32()))
    if r.pos != len(blob):
        raise CheckpointFormatError(f"{path}: {len(blob) - r.pos} trailing bytes")

    config = ModelConfig.from_dict(header["config"])
    if MEAN_FRAME not in tensors:
        raise CheckpointFormatError(f"{path}: missing {MEAN_FRAME}")
    model = V2CNet(config, Vocabulary(header["vocab"]), header["classes"], tensors.pop(MEAN_FRAME))
    params = model.parameters()
    unknown = sorted(set(tensors) - set(params))
    if unknown:
        raise UnknownTensorError(f"{path}: unknown tensor(s) {unknown}")
    missing = sorted(set(params) - set(tensors))
    if missing:
        raise CheckpointFormatError(f"{path}: missing tensor(s) {missing}")
    for name, p in params.items():
        if tensors[name].shape != p.value.shape:
            raise CheckpointFormatError(
                f"{path}: {name} has shape {tensors[name].shape}, expected {p.value.shape}")
        p.value[...] = tensors[name]

    o = header["optimizer"]
    opt = Adam(model.trainable(), lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"])
    for name, state in opt.states.items():
        try:
            state.first_moment = opt_records.pop(f"m/{name}")
            state.second_moment = opt_records.pop(f"v/{name}")
            state.step_count = int(o["step_counts"][name])
        except KeyError as exc:
            raise CheckpointFormatError(f"{path}: missing optimizer state for {name}") from exc
    if opt_records:
        raise UnknownTensorError(f"{path}: unknown optimizer record(s) {sorted(opt_records)}")
    return Checkpoint(model, opt, int(header["epoch"]), header["rng_state"])
