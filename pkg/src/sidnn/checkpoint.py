"""Binary checkpoint serialization.

Layout (little-endian): magic b"SIDNN", version byte 0x01, u32 header length,
UTF-8 JSON header (model spec + standardizer), u32 tensor count, then per
tensor: u32 name length, name bytes, u32 ndim, u64 dims, raw float64 data.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import Standardizer
from .errors import CorruptionError, FormatError
from .models import ModelSpec, ParamStore

MAGIC = b"SIDNN"
VERSION = 1


@dataclass
class Checkpoint:
    version: int
    spec: ModelSpec
    standardizer: Standardizer
    params: ParamStore


def save_checkpoint(
    path: str | Path, spec: ModelSpec, standardizer: Standardizer, params: ParamStore
) -> None:
    header = {
        "spec": asdict(spec),
        "standardizer": {
            "u_mean": standardizer.u_mean.tolist(),
            "u_std": standardizer.u_std.tolist(),
            "y_mean": standardizer.y_mean.tolist(),
            "y_std": standardizer.y_std.tolist(),
        },
    }
    header_bytes = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(bytes([VERSION]))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(struct.pack("<I", len(params)))
        for name, arr in params.items():
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.blob):
            raise CorruptionError(
                f"checkpoint truncated: needed {n} bytes at byte {self.offset}, "
                f"file has {len(self.blob)}"
            )
        out = self.blob[self.offset : self.offset + n]
        self.offset += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def load_checkpoint(path: str | Path) -> Checkpoint:
    blob = Path(path).read_bytes()
    r = _Reader(blob)
    if r.take(len(MAGIC)) != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic bytes)")
    version = r.take(1)[0]
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(r.take(r.u32()).decode("utf-8"))
    spec = ModelSpec(**header["spec"])
    s = header["standardizer"]
    standardizer = Standardizer(
        u_mean=np.asarray(s["u_mean"]), u_std=np.asarray(s["u_std"]),
        y_mean=np.asarray(s["y_mean"]), y_std=np.asarray(s["y_std"]),
    )
    arrays: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        ndim = r.u32()
        shape = tuple(r.u64() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        raw = r.take(count * 8)
        arrays[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    params = ParamStore(arrays)
    params.validate_for(spec)
    return Checkpoint(version=version, spec=spec, standardizer=standardizer, params=params)
