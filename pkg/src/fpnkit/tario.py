"""TAR0 binary tensor archives.

Single record layout (little-endian throughout):

    magic  ``TNSR`` (4 bytes)
    u8     version, always 0
    u8     dtype code: 0 = float32, 1 = float64
    u8     rank
    u32*rank  extents
    raw row-major values

Named streams (checkpoints, traces, dataset archives) concatenate records,
each preceded by a u16 name length and the UTF-8 name bytes.  Files use the
``.tnsr`` extension by convention.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO, Dict, Iterator, Tuple

import numpy as np

from .errors import ConfigurationError

MAGIC = b"TNSR"
VERSION = 0

_DTYPE_BY_CODE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_BY_KIND = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def _dtype_code(arr: np.ndarray) -> int:
    code = _CODE_BY_KIND.get(np.dtype(arr.dtype.type))
    if code is None:
        raise ConfigurationError(f"TAR0 stores float32/float64 tensors only, got dtype {arr.dtype}")
    return code


def write_tensor(fp: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    code = _dtype_code(arr)
    if arr.ndim > 255:
        raise ConfigurationError(f"TAR0 rank limit is 255, got {arr.ndim}")
    fp.write(struct.pack("<4sBBB", MAGIC, VERSION, code, arr.ndim))
    fp.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fp.write(np.ascontiguousarray(arr, dtype=_DTYPE_BY_CODE[code]).tobytes())


def read_tensor(fp: BinaryIO) -> np.ndarray:
    header = fp.read(7)
    if len(header) != 7:
        raise ConfigurationError("truncated TAR0 record header")
    magic, version, code, rank = struct.unpack("<4sBBB", header)
    if magic != MAGIC:
        raise ConfigurationError(f"bad TAR0 magic {magic!r}")
    if version != VERSION:
        raise ConfigurationError(f"unsupported TAR0 version {version}")
    if code not in _DTYPE_BY_CODE:
        raise ConfigurationError(f"unknown TAR0 dtype code {code}")
    shape = struct.unpack(f"<{rank}I", fp.read(4 * rank)) if rank else ()
    dtype = _DTYPE_BY_CODE[code]
    count = int(np.prod(shape)) if rank else 1
    raw = fp.read(count * dtype.itemsize)
    if len(raw) != count * dtype.itemsize:
        raise ConfigurationError("truncated TAR0 record payload")
    return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fp:
        write_tensor(fp, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fp:
        return read_tensor(fp)


def write_named(fp: BinaryIO, name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    if len(encoded) > 0xFFFF:
        raise ConfigurationError(f"record name too long ({len(encoded)} bytes)")
    fp.write(struct.pack("<H", len(encoded)))
    fp.write(encoded)
    write_tensor(fp, arr)


def iter_named(fp: BinaryIO) -> Iterator[Tuple[str, np.ndarray]]:
    while True:
        prefix = fp.read(2)
        if not prefix:
            return
        if len(prefix) != 2:
            raise ConfigurationError("truncated record name length")
        (length,) = struct.unpack("<H", prefix)
        name = fp.read(length).decode("utf-8")
        yield name, read_tensor(fp)


def save_named(path, records: Dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fp:
        for name, arr in records.items():
            write_named(fp, name, arr)


def load_named(path) -> Dict[str, np.ndarray]:
    out: Dict[str, np.ndarray] = {}
    with open(path, "rb") as fp:
        for name, arr in iter_named(fp):
            if name in out:
                raise ConfigurationError(f"duplicate record name {name!r} in {Path(path).name}")
            out[name] = arr
    return out
