"""Little-endian checkpoint container.

Layout::

    magic        8 bytes   b"DSLNCKPT"
    version      u32
    digest       32 bytes  sha256 of the model config
    meta_len     u32
    meta         meta_len bytes of UTF-8 JSON (config, iteration, rng state, ...)
    n_records    u32
    n_records x:
        path_len u16, path (UTF-8)
        ndim     u8, extents u32 x ndim
        data     float32 x prod(extents)

All integers and floats are little-endian. Writes go to a temporary file that is
renamed over the destination, so a reader never sees a partial checkpoint.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ModelConfig

MAGIC = b"DSLNCKPT"
VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    digest: bytes
    meta: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def with_prefix(self, prefix: str) -> dict[str, np.ndarray]:
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def encode(ckpt: Checkpoint) -> bytes:
    if len(ckpt.digest) != 32:
        raise CheckpointError("config digest must be 32 bytes")
    meta = json.dumps(ckpt.meta, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", VERSION), ckpt.digest, struct.pack("<I", len(meta)), meta,
             struct.pack("<I", len(ckpt.tensors))]
    for path, arr in ckpt.tensors.items():
        name = path.encode()
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(name)) + name)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> Checkpoint:
    mv = memoryview(buf)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(mv):
            raise CheckpointError("truncated checkpoint")
        out = mv[pos:pos + n]
        pos += n
        return out

    if bytes(take(8)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    digest = bytes(take(32))
    (meta_len,) = struct.unpack("<I", take(4))
    meta = json.loads(bytes(take(meta_len)).decode())
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(take(4 * n), dtype="<f4").astype(np.float32).reshape(shape)
    if pos != len(mv):
        raise CheckpointError(f"{len(mv) - pos} trailing bytes after the last record")
    return Checkpoint(digest, meta, tensors)


def atomic_write(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path: str | Path, ckpt: Checkpoint) -> None:
    atomic_write(path, encode(ckpt))


def load(path: str | Path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    return decode(data)


# -- model helpers ------------------------------------------------------------------------

def model_checkpoint(model, meta: dict | None = None, extra: dict[str, np.ndarray] | None = None) -> Checkpoint:
    cfg: ModelConfig = model.config
    tensors = {f"param/{p}": t.data for p, t in model.named_parameters()}
    tensors.update(extra or {})
    full_meta = {"model_config": cfg.to_dict(), "seed": model.seed}
    full_meta.update(meta or {})
    return Checkpoint(cfg.digest(), full_meta, tensors)


def load_params(model, ckpt: Checkpoint) -> None:
    """Copy ``param/`` records into ``model`` after checking config and paths."""
    if ckpt.digest != model.config.digest():
        raise CheckpointError("checkpoint config digest does not match the model config")
    params = ckpt.with_prefix("param/")
    named = dict(model.named_parameters())
    missing, unexpected = set(named) - set(params), set(params) - set(named)
    if missing or unexpected:
        raise CheckpointError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
    for path, t in named.items():
        if params[path].shape != t.shape:
            raise CheckpointError(f"{path}: checkpoint extents {params[path].shape} != model {t.shape}")
        t.data = params[path].copy()


def restore_model(path: str | Path):
    """Rebuild a model from a checkpoint file."""
    from .model import build_model

    ckpt = load(path)
    if "model_config" not in ckpt.meta:
        raise CheckpointError(f"{path}: no model config in checkpoint metadata")
    cfg = ModelConfig.from_dict(ckpt.meta["model_config"])
    model = build_model(cfg, ckpt.meta.get("seed", 0))
    load_params(model, ckpt)
    return model, ckpt
