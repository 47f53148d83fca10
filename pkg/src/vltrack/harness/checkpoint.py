"""Checkpoint file: named little-endian tensors plus the run config.

Layout: b"VLTC", u32 version, u32 config length, config text (utf-8), u32
tensor count, then per tensor: u16 name length, name, u8 dtype code, u32 rank,
u32 dims..., payload.  A u32 CRC32 of everything before it closes the file.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from ..errors import FormatError
from ..nn import iter_tensors
from .config import Config, loads
from .model import ModelParams, init_model

MAGIC = b"VLTC"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {v: k for k, v in _DTYPES.items()}


def dumps(params: ModelParams, cfg: Config) -> bytes:
    text = cfg.dumps().encode()
    named = list(iter_tensors(params))
    parts = [MAGIC, struct.pack("<II", VERSION, len(text)), text, struct.pack("<I", len(named))]
    for name, t in named:
        arr = np.asarray(t.data, dtype=t.data.dtype.newbyteorder("<"), order="C")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BI", _CODES[arr.dtype], arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def loads_checkpoint(blob: bytes) -> tuple[ModelParams, Config]:
    try:
        return _parse(blob)
    except FormatError:
        raise
    except (struct.error, ValueError, UnicodeDecodeError, KeyError, IndexError) as exc:
        raise FormatError(f"corrupt checkpoint: {exc}") from exc


def _parse(blob: bytes) -> tuple[ModelParams, Config]:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise FormatError("not a VLTC checkpoint")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("checkpoint checksum mismatch")
    version, n_text = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise FormatError(f"checkpoint version {version} unsupported (expected {VERSION})")
    pos = 12
    cfg = loads(body[pos:pos + n_text].decode())
    pos += n_text
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    table = {}
    for _ in range(count):
        (n_name,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + n_name].decode()
        pos += n_name
        code, rank = struct.unpack_from("<BI", body, pos)
        pos += 5
        dims = struct.unpack_from(f"<{rank}I", body, pos)
        pos += 4 * rank
        dt = _DTYPES[code]
        size = int(np.prod(dims, dtype=np.int64))
        if pos + size * dt.itemsize > len(body):
            raise FormatError(f"truncated payload for {name}")
        table[name] = np.frombuffer(body, dtype=dt, count=size, offset=pos).reshape(dims)
        pos += size * dt.itemsize
    if pos != len(body):
        raise FormatError("trailing bytes in checkpoint")
    params = init_model(cfg)
    expected = dict(iter_tensors(params))
    if set(expected) != set(table):
        missing = sorted(set(expected) - set(table))
        extra = sorted(set(table) - set(expected))
        raise FormatError(f"checkpoint tensors do not match the model (missing {missing[:3]}, extra {extra[:3]})")
    for name, t in expected.items():
        arr = table[name]
        if arr.shape != t.shape:
            raise FormatError(f"{name}: shape {arr.shape} vs model {t.shape}")
        t.data = arr.astype(t.data.dtype)
    return params, cfg


def save(path: str | Path, params: ModelParams, cfg: Config) -> bytes:
    blob = dumps(params, cfg)
    Path(path).write_bytes(blob)
    return blob


def load(path: str | Path) -> tuple[ModelParams, Config]:
    return loads_checkpoint(Path(path).read_bytes())
