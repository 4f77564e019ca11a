"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"EGDC"  u32 version  u32 entry_count
    per entry:
        u32 name_length, name (utf-8)
        u8  dtype tag (0=float32, 1=float64, 2=uint8, 3=int64)
        u32 rank, rank x u32 extents
        payload, row-major little-endian

Entry names are ``model/<param or buffer>``, ``optim/<param>`` (momentum
buffers), ``meta/config`` (uint8 text of the model config) and
``meta/epoch``, ``meta/step``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as configio
from .model import EGDNet, ModelConfig

MAGIC = b"EGDC"
VERSION = 1
_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1"), 3: np.dtype("<i8")}
_TAG_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.uint8): 2, np.dtype(np.int64): 3}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    model_state: dict[str, np.ndarray]
    optimizer_state: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    step: int = 0

    @classmethod
    def from_model(cls, model: EGDNet, optimizer_state=None, epoch: int = 0, step: int = 0) -> "Checkpoint":
        state = {k: v.copy() for k, v in model.state_dict().items()}
        optim = {k: v.copy() for k, v in (optimizer_state or {}).items()}
        return cls(model.config, state, optim, epoch, step)

    def build_model(self) -> EGDNet:
        dtype = next(iter(self.model_state.values())).dtype if self.model_state else np.float32
        model = EGDNet(self.config, dtype=dtype)
        load_into(model, self)
        return model


def load_into(model: EGDNet, ckpt: Checkpoint) -> None:
    """Copy checkpoint tensors into ``model``; names and shapes must agree."""
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    for name in list(params) + list(buffers):
        if name not in ckpt.model_state:
            raise CheckpointError(f"checkpoint lacks tensor '{name}' required by the model")
    for name, arr in ckpt.model_state.items():
        target = params[name].data if name in params else buffers.get(name)
        if target is None:
            raise CheckpointError(f"checkpoint tensor '{name}' does not exist in the model")
        if arr.shape != target.shape:
            raise CheckpointError(
                f"shape mismatch for tensor '{name}': checkpoint {arr.shape}, model {target.shape}"
            )
    model.load_state_dict(ckpt.model_state)


def _entries(ckpt: Checkpoint):
    yield "meta/config", np.frombuffer(configio.dump(ckpt.config).encode("utf-8"), dtype=np.uint8)
    yield "meta/epoch", np.array(ckpt.epoch, dtype=np.int64)
    yield "meta/step", np.array(ckpt.step, dtype=np.int64)
    for name, arr in ckpt.model_state.items():
        yield f"model/{name}", arr
    for name, arr in ckpt.optimizer_state.items():
        yield f"optim/{name}", arr


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    entries = list(_entries(ckpt))
    chunks = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries:
        arr = np.asarray(arr)
        if arr.dtype not in _TAG_OF:
            raise CheckpointError(f"tensor '{name}' has unsupported dtype {arr.dtype}")
        tag = _TAG_OF[arr.dtype]
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<BI", tag, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=_TAGS[tag]).tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: file truncated while reading {what}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    r = _Reader(buf, path)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack("<II", r.take(8, "header"))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    tensors: dict[str, np.ndarray] = {}
    prev = "<start>"
    for i in range(count):
        (name_len,) = struct.unpack("<I", r.take(4, f"name of entry #{i} (after '{prev}')"))
        name = r.take(name_len, f"name of entry #{i} (after '{prev}')").decode("utf-8")
        tag, rank = struct.unpack("<BI", r.take(5, f"header of tensor '{name}'"))
        if tag not in _TAGS:
            raise CheckpointError(f"{path}: tensor '{name}' has unknown dtype tag {tag}")
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank, f"shape of tensor '{name}'"))
        dtype = _TAGS[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        payload = r.take(nbytes, f"payload of tensor '{name}'")
        tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
        prev = name
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - r.pos} trailing bytes after last tensor")
    try:
        text = tensors.pop("meta/config").tobytes().decode("utf-8")
        epoch = int(tensors.pop("meta/epoch"))
        step = int(tensors.pop("meta/step"))
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing metadata entry {exc}") from None
    cfg = configio.build(ModelConfig, configio.parse_key_values(text, f"{path}:meta/config"))
    model_state = {k[6:]: v for k, v in tensors.items() if k.startswith("model/")}
    optim = {k[6:]: v for k, v in tensors.items() if k.startswith("optim/")}
    return Checkpoint(cfg, model_state, optim, epoch, step)
