"""TLVM checkpoint format: byte-exact model serialization.

Layout, all integers little-endian:

    magic "TLVM" | version u32 | config_len u32 | config JSON (UTF-8)
    n_tensors u32
    per tensor: name_len u32 | name UTF-8 | dtype u32 (1 = float64)
                rank u32 | extents u64 x rank | payload (LE float64)

The config document holds the model config plus the training lineage, so a
checkpoint records which stages produced it.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import ModelBundle, ModelConfig
from .tensor import Tensor

MAGIC = b"TLVM"
VERSION = 1
DTYPE_F64 = 1


class CheckpointFormatError(ValueError):
    """Not a TLVM file, or a structurally malformed one."""


class CheckpointVersionError(ValueError):
    """TLVM file with an unsupported version."""


class CheckpointTruncatedError(ValueError):
    """TLVM file ends before the tensor table is complete."""


def checkpoint_bytes(bundle: ModelBundle) -> bytes:
    """Serialize a bundle; tensor order is sorted by name for stable bytes."""
    doc = json.dumps({"config": bundle.config.to_dict(), "lineage": bundle.lineage},
                     sort_keys=True).encode("utf-8")
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", VERSION)
    out += struct.pack("<I", len(doc))
    out += doc
    names = sorted(bundle.params)
    out += struct.pack("<I", len(names))
    for name in names:
        data = bundle.params[name].data
        nb = name.encode("utf-8")
        out += struct.pack("<I", len(nb))
        out += nb
        out += struct.pack("<I", DTYPE_F64)
        out += struct.pack("<I", data.ndim)
        out += struct.pack("<" + "Q" * data.ndim, *data.shape)
        out += data.astype("<f8").tobytes()
    return bytes(out)


def save_checkpoint(bundle: ModelBundle, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(bundle))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.context = "header"

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(
                f"file ends while reading {self.context}: needed {n} bytes at "
                f"offset {self.pos}, have {len(self.data) - self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint_bytes(data: bytes) -> ModelBundle:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointFormatError(
            f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    version = r.u32()
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported version {version}, expected {VERSION}")
    r.context = "config document"
    doc = json.loads(r.take(r.u32()).decode("utf-8"))
    config = ModelConfig.from_dict(doc["config"])
    lineage = doc.get("lineage", [])
    r.context = "tensor count"
    n_tensors = r.u32()
    params: dict[str, Tensor] = {}
    for i in range(n_tensors):
        r.context = f"tensor #{i} name"
        name = r.take(r.u32()).decode("utf-8")
        r.context = f"tensor '{name}'"
        dtype = r.u32()
        if dtype != DTYPE_F64:
            raise CheckpointFormatError(f"tensor '{name}': unknown dtype code {dtype}")
        rank = r.u32()
        shape = struct.unpack("<" + "Q" * rank, r.take(8 * rank))
        count = int(np.prod(shape)) if rank else 1
        payload = r.take(8 * count)
        arr = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
        params[name] = Tensor(arr, requires_grad=True)
    return ModelBundle(config=config, params=params, lineage=lineage)


def load_checkpoint(path) -> ModelBundle:
    return load_checkpoint_bytes(Path(path).read_bytes())
