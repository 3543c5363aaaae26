"""``.itnn`` checkpoint files.

Layout (little-endian): ``ITNN`` magic, u16 version, u32 JSON length, the
ArchConfig JSON, u32 tensor count, then per tensor u16 name length, UTF-8
name, u8 ndim, u32 dims, float32 data; a CRC32 of everything before it
closes the file. Parameters are stored as float32, so float64 models are
rounded on save.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from ..errors import ConfigError, CorruptFile, FormatError
from .core import ArchConfig, Model

MAGIC = b"ITNN"
VERSION = 1


def checkpoint_bytes(model: Model) -> bytes:
    head = model.config.to_json().encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", VERSION, len(head)), head, struct.pack("<I", len(model.params))]
    for name, arr in model.params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(path, model: Model) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def parse_checkpoint(raw: bytes, source: str = "<bytes>") -> Model:
    if raw[:4] != MAGIC:
        raise FormatError(f"{source}: not an ITNN checkpoint")
    if len(raw) < 14:
        raise CorruptFile(f"{source}: truncated")
    (stored,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(raw[:-4]) != stored:
        raise CorruptFile(f"{source}: checksum mismatch or truncated file")
    try:
        version, jlen = struct.unpack_from("<HI", raw, 4)
        if version != VERSION:
            raise FormatError(f"{source}: unsupported ITNN version {version}")
        pos = 10
        config = ArchConfig.from_dict(json.loads(raw[pos : pos + jlen].decode("utf-8")))
        pos += jlen
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            size = int(np.prod(dims)) if ndim else 1
            arr = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(dims)
            pos += 4 * size
            params[name] = arr.astype(np.float32)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, (FormatError, ConfigError)):
            raise
        raise CorruptFile(f"{source}: malformed checkpoint ({exc})") from exc
    if pos != len(raw) - 4:
        raise CorruptFile(f"{source}: trailing bytes after tensors")
    return Model(config, params)


def load_checkpoint(path, expect: ArchConfig | None = None) -> Model:
    """Read a checkpoint; ``expect`` rejects files built for another architecture."""
    model = parse_checkpoint(Path(path).read_bytes(), str(path))
    if expect is not None and model.config != expect:
        raise ConfigError(
            f"{path}: checkpoint architecture ({model.config.role}, {len(model.config.blocks)} blocks) "
            f"does not match the requested one ({expect.role}, {len(expect.blocks)} blocks)"
        )
    return model
