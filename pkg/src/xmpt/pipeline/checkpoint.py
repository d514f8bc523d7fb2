"""Binary checkpoint format.

Layout, all integers little-endian:

    b"XMPT"                      magic
    u32 version                  currently 1
    u32 meta_len, meta bytes     UTF-8 JSON object, sorted keys, no spaces
    u32 tensor_count
    per tensor:
        u16 name_len, name       UTF-8
        u32 ndim, ndim x u32     shape
        prod(shape) x f32        row-major data

Parameters live in memory as float64 and are rounded to float32 on save.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"XMPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.meta.get("arch", "")

    def to_bytes(self) -> bytes:
        meta = json.dumps(self.meta, sort_keys=True, separators=(",", ":")).encode()
        out = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta, struct.pack("<I", len(self.tensors))]
        for name, arr in self.tensors.items():
            arr = np.asarray(arr)
            bname = name.encode()
            out.append(struct.pack("<H", len(bname)) + bname)
            out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
            out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, raw: bytes, source: str = "<bytes>") -> "Checkpoint":
        pos = 0

        def take(n, what):
            nonlocal pos
            if pos + n > len(raw):
                raise CheckpointError(f"{source}: truncated at byte {pos} reading {what} (need {n}, have {len(raw) - pos})")
            chunk = raw[pos : pos + n]
            pos += n
            return chunk

        magic = take(4, "magic")
        if magic != MAGIC:
            raise CheckpointError(f"{source}: bad magic {magic!r} at byte 0, expected {MAGIC!r}")
        version, meta_len = struct.unpack("<II", take(8, "header"))
        if version != VERSION:
            raise CheckpointError(f"{source}: unsupported version {version}")
        try:
            meta = json.loads(take(meta_len, "metadata").decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"{source}: corrupt metadata: {e}") from None
        (count,) = struct.unpack("<I", take(4, "tensor count"))
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", take(2, "name length"))
            name = take(nlen, "name").decode()
            if name in tensors:
                raise CheckpointError(f"{source}: duplicate tensor name {name!r}")
            (ndim,) = struct.unpack("<I", take(4, f"rank of {name}"))
            shape = struct.unpack(f"<{ndim}I", take(4 * ndim, f"shape of {name}"))
            n = int(np.prod(shape, dtype=np.int64))
            data = np.frombuffer(take(4 * n, f"data of {name}"), dtype="<f4")
            tensors[name] = data.reshape(shape).astype(np.float64)
        if pos != len(raw):
            raise CheckpointError(f"{source}: {len(raw) - pos} trailing bytes after byte {pos}")
        return cls(tensors, meta)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as f:
            f.write(self.to_bytes())
        os.replace(tmp, path)
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.is_file():
            raise CheckpointError(f"missing checkpoint file: {path}")
        return cls.from_bytes(path.read_bytes(), str(path))


def checkpoint_from_net(net, stage: str, step: int, seed: int, cfg_hash: str = "") -> Checkpoint:
    return Checkpoint(
        net.state_dict(),
        {"arch": net.kind, "stage": stage, "step": int(step), "seed": int(seed), "config_hash": cfg_hash},
    )


def net_from_checkpoint(ckpt: Checkpoint, expect: str | None = None):
    from ..models import build_net

    kind = ckpt.kind
    if expect is not None and kind != expect:
        raise CheckpointError(f"checkpoint holds a {kind or 'unknown'} network, expected {expect}")
    net = build_net(kind)
    net.load_state_dict(ckpt.tensors)
    return net
