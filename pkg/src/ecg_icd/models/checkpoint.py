"""Versioned binary checkpoint container.

Layout (little-endian)::

    b"ECKP" | u32 version | u32 json_len | json (utf-8, sorted keys)
    u32 n_tensors | n x [u16 name_len | name | u8 dtype | u8 ndim | ndim x u32 | u64 nbytes | data]
    u32 crc32 of everything above
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..exceptions import CheckpointError
from .config import ModelConfig

MAGIC = b"ECKP"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_CODES = {v: k for k, v in _DTYPES.items()}


@dataclass
class ModelCheckpoint:
    config: ModelConfig
    parameters: dict  # name -> ndarray
    optimizer: dict = field(default_factory=dict)  # name -> ndarray (m.*, v.*)
    epoch: int = 0
    val_macro_auroc: float | None = None
    metadata: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        header = {
            "config": self.config.to_dict(),
            "epoch": int(self.epoch),
            "val_macro_auroc": None if self.val_macro_auroc is None else float(self.val_macro_auroc),
            "metadata": self.metadata,
        }
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        tensors = [(f"model.{k}", v) for k, v in self.parameters.items()]
        tensors += [(f"opt.{k}", v) for k, v in self.optimizer.items()]
        parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob, struct.pack("<I", len(tensors))]
        for name, arr in tensors:
            arr = np.asarray(arr)
            dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
            if dt == np.bool_:
                arr, dt = arr.astype(np.uint8), np.dtype("u1")
            if dt not in _CODES:
                raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
            data = np.ascontiguousarray(arr, dtype=dt).tobytes()
            name_b = name.encode("utf-8")
            parts.append(struct.pack("<H", len(name_b)))
            parts.append(name_b)
            parts.append(struct.pack("<BB", _CODES[dt], arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(struct.pack("<Q", len(data)))
            parts.append(data)
        body = b"".join(parts)
        return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelCheckpoint":
        if len(data) < 16 or data[:4] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
        if zlib.crc32(body) & 0xFFFFFFFF != crc:
            raise CheckpointError("checkpoint CRC mismatch")
        version, json_len = struct.unpack_from("<II", body, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        off = 12
        header = json.loads(body[off:off + json_len].decode("utf-8"))
        off += json_len
        (n,) = struct.unpack_from("<I", body, off)
        off += 4
        params, opt = {}, {}
        for _ in range(n):
            (name_len,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off:off + name_len].decode("utf-8")
            off += name_len
            code, ndim = struct.unpack_from("<BB", body, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}I", body, off)
            off += 4 * ndim
            (nbytes,) = struct.unpack_from("<Q", body, off)
            off += 8
            arr = np.frombuffer(body, dtype=_DTYPES[code], count=nbytes // _DTYPES[code].itemsize,
                                offset=off).reshape(shape).copy()
            off += nbytes
            group, _, key = name.partition(".")
            (params if group == "model" else opt)[key] = arr
        if off != len(body):
            raise CheckpointError("trailing bytes in checkpoint")
        return cls(ModelConfig.from_dict(header["config"]), params, opt, header["epoch"],
                   header["val_macro_auroc"], header.get("metadata", {}))

    @classmethod
    def load(cls, path) -> "ModelCheckpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def torch_parameters(self, dtype=None):
        import torch

        out = {}
        for k, v in self.parameters.items():
            t = torch.from_numpy(np.array(v))
            if dtype is not None and t.is_floating_point():
                t = t.to(dtype)
            out[k] = t
        return out

    def build(self, dtype=None):
        """Instantiate the model with the stored parameters."""
        import torch

        from . import build_model, set_parameters

        first = next(iter(self.parameters.values()))
        dtype = dtype or (torch.float64 if np.asarray(first).dtype == np.float64 else torch.float32)
        return set_parameters(build_model(self.config, dtype), self.torch_parameters(dtype))
