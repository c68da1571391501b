"""Binary named-tensor checkpoints.

Layout (all integers little-endian)::

    b"EPALM\\x01"
    u32  tensor count
    per tensor:
        u16 name length, UTF-8 name
        u8  dtype code (0 = float32, 1 = float64)
        u8  rank, then rank x u32 dims
        raw little-endian data
    u32  CRC32 of everything between the magic and the CRC

Run metadata (variant echo, step, epoch) goes to a JSON sidecar
``<path>.meta.json`` so the tensor file stays a pure tensor container.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"EPALM\x01"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(ValueError):
    """Invalid, corrupt, or incompatible checkpoint file."""


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes())
    payload = b"".join(parts)
    return MAGIC + payload + struct.pack("<I", zlib.crc32(payload))


def decode_tensors(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:5] != MAGIC[:5]:
        raise CheckpointError("not an EPALM checkpoint (bad magic)")
    if blob[5:6] != MAGIC[5:6]:
        raise CheckpointError(f"unsupported checkpoint version {blob[5]}")
    if len(blob) < len(MAGIC) + 8:
        raise CheckpointError("checkpoint truncated")
    payload, (crc,) = blob[len(MAGIC):-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) != crc:
        raise CheckpointError("checkpoint CRC mismatch (truncated or corrupt)")
    out: dict[str, np.ndarray] = {}
    try:
        (count,), pos = struct.unpack_from("<I", payload, 0), 4
        for _ in range(count):
            (n,) = struct.unpack_from("<H", payload, pos)
            pos += 2
            name = payload[pos:pos + n].decode("utf-8")
            pos += n
            code, rank = struct.unpack_from("<BB", payload, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}I", payload, pos)
            pos += 4 * rank
            dt = _DTYPES[code]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(payload):
                raise CheckpointError(f"{name}: data truncated")
            out[name] = np.frombuffer(payload, dtype=dt, count=nbytes // dt.itemsize,
                                      offset=pos).reshape(dims).astype(dt.newbyteorder("="))
            pos += nbytes
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    if pos != len(payload):
        raise CheckpointError("trailing bytes after last tensor")
    return out


def save_checkpoint(model, path: str | Path, trainable_only: bool = True,
                    meta: dict | None = None) -> None:
    tensors = {name: p.data for name, p in model.named_parameters()
               if p.trainable or not trainable_only}
    path = Path(path)
    path.write_bytes(encode_tensors(tensors))
    if meta is not None:
        Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path: str | Path, model) -> dict:
    """Copy tensors from ``path`` into ``model``; returns the sidecar metadata if present."""
    path = Path(path)
    tensors = decode_tensors(path.read_bytes())
    own = dict(model.named_parameters())
    for name, arr in tensors.items():
        if name not in own:
            raise CheckpointError(f"checkpoint tensor {name!r} has no counterpart in the model")
        if own[name].shape != arr.shape:
            raise CheckpointError(f"{name}: checkpoint shape {arr.shape} != model shape {own[name].shape}")
    missing = [n for n, p in own.items() if p.trainable and n not in tensors]
    if missing:
        raise CheckpointError(f"checkpoint lacks trainable tensor(s): {', '.join(missing[:5])}")
    for name, arr in tensors.items():
        own[name].data = arr.astype(own[name].dtype, copy=True)
    meta_path = Path(str(path) + ".meta.json")
    return json.loads(meta_path.read_text()) if meta_path.exists() else {}
