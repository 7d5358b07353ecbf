"""Single-file named-tensor container.

Layout: 8-byte little-endian header length, a UTF-8 JSON header mapping tensor
names to ``{"dtype", "shape", "data_offsets"}`` plus a ``"__metadata__"``
object, then the raw little-endian tensor bytes back to back.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Any, Dict

import numpy as np
import torch

_DTYPES = {
    torch.float32: ("F32", "<f4"),
    torch.float64: ("F64", "<f8"),
    torch.int64: ("I64", "<i8"),
}
_BY_CODE = {code: (dt, np_dt) for dt, (code, np_dt) in _DTYPES.items()}
METADATA_KEY = "__metadata__"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: Dict[str, torch.Tensor]
    metadata: Dict[str, Any] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        header: Dict[str, Any] = {METADATA_KEY: self.metadata}
        blobs = []
        offset = 0
        for name, t in self.tensors.items():
            if name == METADATA_KEY:
                raise CheckpointError(f"reserved tensor name {name!r}")
            if t.dtype not in _DTYPES:
                raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
            code, np_dt = _DTYPES[t.dtype]
            raw = t.detach().contiguous().numpy().astype(np_dt, copy=False).tobytes()
            header[name] = {"dtype": code, "shape": list(t.shape),
                            "data_offsets": [offset, offset + len(raw)]}
            blobs.append(raw)
            offset += len(raw)
        text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        text += b" " * (-len(text) % 8)
        return struct.pack("<Q", len(text)) + text + b"".join(blobs)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if len(data) < 8:
            raise CheckpointError("truncated checkpoint")
        (n,) = struct.unpack("<Q", data[:8])
        if 8 + n > len(data):
            raise CheckpointError("header length exceeds file size")
        header = json.loads(data[8:8 + n].decode("utf-8"))
        metadata = header.pop(METADATA_KEY, {})
        body = memoryview(data)[8 + n:]
        entries = sorted(header.items(), key=lambda kv: kv[1]["data_offsets"][0])
        tensors = {}
        for name, info in entries:
            dt, np_dt = _BY_CODE[info["dtype"]]
            start, end = info["data_offsets"]
            if end > len(body):
                raise CheckpointError(f"tensor {name} runs past end of file")
            arr = np.frombuffer(body[start:end], dtype=np_dt).reshape(info["shape"])
            tensors[name] = torch.from_numpy(arr.copy()).to(dt)
        return cls(tensors, metadata)

    def save(self, path: str) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path: str) -> "Checkpoint":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())
