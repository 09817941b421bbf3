"""Bit-exact named-tensor checkpoint format.

Layout::

    b"SMAE" | u32 format_version | u64 header_length | header JSON | payload

All integers are little-endian. The header is UTF-8 JSON with keys
``format_version``, ``tensors`` (a list of ``{name, dtype, shape, offset,
length}``, offsets relative to the payload start) and ``metadata``. The
payload holds raw little-endian float32 data.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

MAGIC = b"SMAE"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


@dataclass
class NamedTensorStore:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.tensors = {k: np.array(v, dtype="<f4", order="C") for k, v in self.tensors.items()}

    @classmethod
    def from_module(cls, module: torch.nn.Module, metadata: dict | None = None) -> "NamedTensorStore":
        tensors = {k: v.detach().cpu().to(torch.float32).numpy().copy() for k, v in module.state_dict().items()}
        return cls(tensors, dict(metadata or {}))

    def state_dict(self) -> dict[str, torch.Tensor]:
        return {k: torch.from_numpy(v.astype(np.float32)) for k, v in self.tensors.items()}

    def table(self) -> list[dict]:
        rows, offset = [], 0
        for name, arr in self.tensors.items():
            rows.append({"name": name, "dtype": "f32", "shape": list(arr.shape), "offset": offset, "length": arr.nbytes})
            offset += arr.nbytes
        return rows

    def to_bytes(self) -> bytes:
        header = {"format_version": FORMAT_VERSION, "metadata": self.metadata, "tensors": self.table()}
        hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        payload = b"".join(arr.tobytes() for arr in self.tensors.values())
        return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(hbytes)) + hbytes + payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "NamedTensorStore":
        if len(data) < _PREFIX.size:
            raise CheckpointError("file too short for a checkpoint prefix")
        magic, version, hlen = _PREFIX.unpack_from(data)
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported format version {version} (expected {FORMAT_VERSION})")
        start = _PREFIX.size + hlen
        if start > len(data):
            raise CheckpointError("header extends past end of file")
        try:
            header = json.loads(data[_PREFIX.size:start].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt header: {exc}") from None
        if header.get("format_version") != version:
            raise CheckpointError("header format_version disagrees with prefix")
        payload_len = len(data) - start
        table = header.get("tensors", [])
        validate_table(table, payload_len)
        tensors = {}
        for row in table:
            off = start + row["offset"]
            arr = np.frombuffer(data, dtype="<f4", count=row["length"] // 4, offset=off)
            tensors[row["name"]] = arr.reshape(row["shape"]).copy()
        return cls(tensors, header.get("metadata", {}))


def validate_table(table: list[dict], payload_len: int) -> None:
    names = set()
    spans = []
    for row in table:
        name = row.get("name")
        if name in names:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        names.add(name)
        if row.get("dtype") != "f32":
            raise CheckpointError(f"{name}: unsupported dtype {row.get('dtype')!r}")
        shape, off, length = row.get("shape"), row.get("offset"), row.get("length")
        if not isinstance(shape, list) or any(not isinstance(d, int) or d < 0 for d in shape):
            raise CheckpointError(f"{name}: invalid shape {shape!r}")
        if not isinstance(off, int) or not isinstance(length, int) or off < 0 or length < 0:
            raise CheckpointError(f"{name}: invalid offset/length")
        if int(np.prod(shape, dtype=np.int64)) * 4 != length:
            raise CheckpointError(f"{name}: byte length {length} does not match shape {shape}")
        if off + length > payload_len:
            raise CheckpointError(f"{name}: bytes [{off}, {off + length}) out of bounds (payload is {payload_len} bytes)")
        spans.append((off, off + length, name))
    spans.sort()
    for (a0, a1, an), (b0, b1, bn) in zip(spans, spans[1:]):
        if b0 < a1 and b1 > b0 and a1 > a0:
            raise CheckpointError(f"tensors {an!r} and {bn!r} overlap")


def save_checkpoint(store: NamedTensorStore, path) -> None:
    """Write atomically: a partial file never replaces a good one."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(store.to_bytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> NamedTensorStore:
    return NamedTensorStore.from_bytes(Path(path).read_bytes())
