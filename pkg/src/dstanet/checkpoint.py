"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic        8 bytes  b"DSTACKPT"
    version      u32      currently 1
    n_params     u32
    config_len   u64
    config       config_len bytes, UTF-8 JSON (sorted keys, compact)
    records      n_params times:
                   name_len  u16
                   name      name_len bytes, UTF-8
                   ndim      u8
                   shape     ndim x u32
                   payload   prod(shape) x float32 (<f4), row-major
    index        n_params x u64, byte offset of each record from file start
    index_offset u64, byte offset of the index section

Parameters are stored as 32-bit floats and widened to 64 bits on load, so
save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"DSTACKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict  # name -> np.ndarray, insertion ordered
    config: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        cfg = json.dumps(self.config, sort_keys=True, separators=(",", ":")).encode()
        out = bytearray()
        out += MAGIC
        out += struct.pack("<IIQ", VERSION, len(self.params), len(cfg))
        out += cfg
        offsets = []
        for name, arr in self.params.items():
            offsets.append(len(out))
            raw = name.encode()
            arr = np.asarray(arr)
            out += struct.pack("<H", len(raw)) + raw
            out += struct.pack("<B", arr.ndim)
            out += struct.pack(f"<{arr.ndim}I", *arr.shape)
            out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
        index_offset = len(out)
        out += struct.pack(f"<{len(offsets)}Q", *offsets)
        out += struct.pack("<Q", index_offset)
        return bytes(out)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if buf[:8] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        try:
            version, n, cfg_len = struct.unpack_from("<IIQ", buf, 8)
            if version != VERSION:
                raise CheckpointError(f"unsupported checkpoint version {version}")
            pos = 24
            config = json.loads(buf[pos:pos + cfg_len].decode())
            (index_offset,) = struct.unpack_from("<Q", buf, len(buf) - 8)
            offsets = struct.unpack_from(f"<{n}Q", buf, index_offset)
            params = {}
            for off in offsets:
                (name_len,) = struct.unpack_from("<H", buf, off)
                off += 2
                name = buf[off:off + name_len].decode()
                off += name_len
                (ndim,) = struct.unpack_from("<B", buf, off)
                off += 1
                shape = struct.unpack_from(f"<{ndim}I", buf, off)
                off += 4 * ndim
                count = int(np.prod(shape, dtype=np.int64))
                payload = np.frombuffer(buf, dtype="<f4", count=count, offset=off)
                params[name] = payload.astype(np.float64).reshape(shape)
        except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
        return cls(params=params, config=config)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())
