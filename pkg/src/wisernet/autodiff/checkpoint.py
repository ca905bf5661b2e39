"""Binary checkpoint format.

Layout, all integers little-endian::

    magic      8 bytes   b"WSDGCKPT"
    version    uint32    currently 1
    meta_len   uint32    length of the metadata block
    meta       bytes     UTF-8 ``key=value`` lines (model configuration)
    count      uint32    number of tensors
    count x {
        name_len uint16
        name     bytes   UTF-8
        ndim     uint8
        dims     ndim x uint32
    }
    payload    float32   every tensor's values, C order, in header order

Values are always stored as little-endian float32, even for float64 models.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, List, Mapping, Tuple

import numpy as np

from wisernet.exceptions import LoadError

MAGIC = b"WSDGCKPT"
VERSION = 1


def _encode_meta(meta: Mapping[str, object]) -> bytes:
    lines = []
    for key, value in meta.items():
        if "\n" in str(value) or "=" in str(key):
            raise ValueError(f"metadata entry {key!r} cannot be encoded")
        lines.append(f"{key}={value}")
    return "\n".join(lines).encode("utf-8")


def _decode_meta(raw: bytes) -> Dict[str, str]:
    meta = {}
    for line in raw.decode("utf-8").splitlines():
        if line:
            key, _, value = line.partition("=")
            meta[key] = value
    return meta


def save_checkpoint(path, tensors: List[Tuple[str, np.ndarray]], meta: Mapping[str, object] = ()) -> None:
    meta_raw = _encode_meta(dict(meta))
    header = [MAGIC, struct.pack("<II", VERSION, len(meta_raw)), meta_raw, struct.pack("<I", len(tensors))]
    payload = []
    for name, arr in tensors:
        raw_name = name.encode("utf-8")
        header.append(struct.pack("<H", len(raw_name)) + raw_name)
        header.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        payload.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(header + payload))


def load_checkpoint(path) -> Tuple[Dict[str, str], Dict[str, np.ndarray]]:
    """Read a checkpoint; returns ``(meta, {name: float32 array})`` in file order."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:8] != MAGIC:
        raise LoadError(f"{path} is not a checkpoint (bad magic)")
    try:
        pos = 8
        version, meta_len = struct.unpack_from("<II", raw, pos)
        pos += 8
        if version != VERSION:
            raise LoadError(f"{path}: unsupported checkpoint version {version}")
        meta = _decode_meta(raw[pos : pos + meta_len])
        pos += meta_len
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        entries = []
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            entries.append((name, dims))
        tensors = {}
        for name, dims in entries:
            n = int(np.prod(dims)) if dims else 1
            arr = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(dims)
            tensors[name] = arr.astype(np.float32)
            pos += 4 * n
    except struct.error as exc:
        raise LoadError(f"{path}: truncated checkpoint") from exc
    except ValueError as exc:
        raise LoadError(f"{path}: truncated checkpoint ({exc})") from exc
    if pos != len(raw):
        raise LoadError(f"{path}: {len(raw) - pos} trailing bytes")
    return meta, tensors
