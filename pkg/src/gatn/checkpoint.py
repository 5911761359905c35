"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic      b"GATN"
    version    u32
    stage      u16 length + utf-8
    config     u32 length + utf-8 (``key = value`` lines)
    count      u32
    table      count x (u16 name length, name, u8 dtype tag, u8 rank, rank x u32 extents)
    payloads   concatenated little-endian tensor data, in table order

The whole table is read and the file size checked against it before any
tensor is allocated.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import config as config_mod
from . import global_net, local_net, ops
from .tensor import Tensor, resolve_dtype

MAGIC = b"GATN"
VERSION = 1
DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
TAG_OF = {np.dtype("float32"): 0, np.dtype("float64"): 1}
STAGES = ("global", "local")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    stage: str
    tensors: dict[str, np.ndarray]
    config: config_mod.Config


def save(path, tensors: dict[str, np.ndarray], cfg: config_mod.Config, stage: str) -> None:
    if stage not in STAGES:
        raise CheckpointError(f"stage must be one of {STAGES}")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    sb = stage.encode()
    buf.write(struct.pack("<H", len(sb)) + sb)
    cb = cfg.to_text().encode()
    buf.write(struct.pack("<I", len(cb)) + cb)
    buf.write(struct.pack("<I", len(tensors)))
    arrays = []
    for name, arr in tensors.items():
        a = np.asarray(arr)
        if a.dtype not in TAG_OF:
            raise CheckpointError(f"tensor {name}: unsupported element type {a.dtype}")
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)) + nb)
        buf.write(struct.pack("<BB", TAG_OF[a.dtype], a.ndim))
        buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
        arrays.append(a.astype(DTYPE_TAGS[TAG_OF[a.dtype]], copy=False))
    for a in arrays:
        buf.write(np.ascontiguousarray(a).tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(buf.getvalue())
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load(path, dtype: Optional[str] = None) -> Checkpoint:
    """Read a checkpoint; ``dtype`` optionally converts every tensor (e.g. exact widening to float64)."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a GATN checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads version {VERSION}")
    (n,) = r.unpack("<H")
    stage = r.take(n).decode()
    if stage not in STAGES:
        raise CheckpointError(f"{path}: unknown stage {stage!r}")
    (n,) = r.unpack("<I")
    cfg = config_mod.parse(r.take(n).decode())
    (count,) = r.unpack("<I")
    table = []
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode()
        tag, rank = r.unpack("<BB")
        if tag not in DTYPE_TAGS:
            raise CheckpointError(f"{path}: tensor {name} has unknown element type tag {tag}")
        shape = r.unpack(f"<{rank}I") if rank else ()
        table.append((name, DTYPE_TAGS[tag], tuple(shape)))
    need = sum(dt.itemsize * int(np.prod(shape, dtype=np.int64)) for _, dt, shape in table)
    if len(r.data) - r.pos != need:
        raise CheckpointError(f"{path}: payload is {len(r.data) - r.pos} bytes, table says {need} (truncated or corrupt)")
    out_dt = resolve_dtype(dtype) if dtype else None
    tensors = {}
    for name, dt, shape in table:
        size = dt.itemsize * int(np.prod(shape, dtype=np.int64))
        a = np.frombuffer(r.take(size), dtype=dt).reshape(shape)
        a = a.astype(dt.newbyteorder("="))
        tensors[name] = a.astype(out_dt) if out_dt is not None else a
    return Checkpoint(stage, tensors, cfg)


# --- network <-> tensor table ------------------------------------------------------------


def _params_to_table(tensors: dict[str, Tensor], stats: dict[str, ops.RunningStats], prefix: str) -> dict[str, np.ndarray]:
    out = {f"{prefix}{k}": v.data for k, v in tensors.items()}
    for k, s in stats.items():
        out[f"{prefix}{k}.running_mean"] = s.mean
        out[f"{prefix}{k}.running_var"] = s.var
    return out


def _table_to_params(table: dict[str, np.ndarray], prefix: str):
    tensors, stats = {}, {}
    for key, arr in table.items():
        if not key.startswith(prefix):
            continue
        name = key[len(prefix) :]
        if name.endswith(".running_mean") or name.endswith(".running_var"):
            layer, which = name.rsplit(".", 1)
            s = stats.setdefault(layer, ops.RunningStats(len(arr), arr.dtype))
            if which == "running_mean":
                s.mean = arr.copy()
            else:
                s.var = arr.copy()
        else:
            tensors[name] = Tensor(arr.copy(), requires_grad=True, dtype=arr.dtype)
    return tensors, stats


def global_table(p: global_net.GlobalParams, prefix: str = "global.") -> dict[str, np.ndarray]:
    return _params_to_table(p.tensors, p.stats, prefix)


def local_table(p: local_net.LocalParams, prefix: str = "local.") -> dict[str, np.ndarray]:
    return _params_to_table(p.tensors, p.stats, prefix)


def global_params(ckpt: Checkpoint) -> global_net.GlobalParams:
    tensors, stats = _table_to_params(ckpt.tensors, "global.")
    if "conv1.w" not in tensors:
        raise CheckpointError("checkpoint has no global network tensors")
    return global_net.GlobalParams(tensors, stats)


def local_params(ckpt: Checkpoint) -> local_net.LocalParams:
    tensors, stats = _table_to_params(ckpt.tensors, "local.")
    if ckpt.stage != "local" or "conv0.w" not in tensors:
        raise CheckpointError("checkpoint has no local network tensors (train-triplet output needed)")
    blocks = len({k.split(".")[0] for k in tensors if k.startswith("conv")})
    channels = tuple(tensors[f"conv{b}.w"].shape[0] for b in range(blocks))
    return local_net.LocalParams(tensors, stats, channels, (0,))


def save_global(path, p: global_net.GlobalParams, cfg: config_mod.Config) -> None:
    save(path, global_table(p), cfg, "global")


def save_local(path, g: global_net.GlobalParams, p: local_net.LocalParams, cfg: config_mod.Config) -> None:
    save(path, {**global_table(g), **local_table(p)}, cfg, "local")
