"""
Raw tensor files ("SFTN").

Layout: magic ``SFTN``, u32 version, u32 rank, u32 per extent, u32 dtype tag
(0 = float32, 1 = float64), then the little-endian row-major payload. All
integers are little-endian.
"""

from __future__ import annotations

import io
import os
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np

from sfim.errors import CheckpointFormatError, ConfigError, SfimIOError

TENSOR_MAGIC = b"SFTN"
TENSOR_VERSION = 1
DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
TAG_OF = {"float32": 0, "float64": 1}

PathLike = Union[str, Path]


def _u32(values) -> bytes:
    return np.asarray(values, dtype="<u4").tobytes()


def _read_exact(stream: BinaryIO, count: int, what: str) -> bytes:
    chunk = stream.read(count)
    if len(chunk) != count:
        raise CheckpointFormatError(f"truncated tensor data while reading {what}")
    return chunk


def _read_u32(stream: BinaryIO, count: int, what: str) -> np.ndarray:
    return np.frombuffer(_read_exact(stream, 4 * count, what), dtype="<u4")


def write_tensor_stream(stream: BinaryIO, array: np.ndarray, dtype: str = "float64") -> None:
    if dtype not in TAG_OF:
        raise ConfigError(f"unsupported storage dtype {dtype!r}; use float32 or float64")
    array = np.asarray(array)
    stream.write(TENSOR_MAGIC)
    stream.write(_u32([TENSOR_VERSION, array.ndim]))
    stream.write(_u32(array.shape))
    stream.write(_u32([TAG_OF[dtype]]))
    stream.write(np.ascontiguousarray(array, dtype=DTYPE_TAGS[TAG_OF[dtype]]).tobytes())


def read_tensor_stream(stream: BinaryIO) -> np.ndarray:
    """Read one tensor; the result is always float64."""
    magic = stream.read(4)
    if magic != TENSOR_MAGIC:
        raise CheckpointFormatError(f"bad tensor magic {magic!r}")
    version, rank = (int(v) for v in _read_u32(stream, 2, "header"))
    if version != TENSOR_VERSION:
        raise CheckpointFormatError(f"tensor format version {version} is not supported")
    shape = tuple(int(e) for e in _read_u32(stream, rank, "extents"))
    tag = int(_read_u32(stream, 1, "dtype tag")[0])
    if tag not in DTYPE_TAGS:
        raise CheckpointFormatError(f"unknown dtype tag {tag}")
    dtype = DTYPE_TAGS[tag]
    count = int(np.prod(shape, dtype=np.int64))
    payload = _read_exact(stream, count * dtype.itemsize, "payload")
    return np.frombuffer(payload, dtype=dtype).astype(np.float64).reshape(shape)


def tensor_bytes(array: np.ndarray, dtype: str = "float64") -> bytes:
    buffer = io.BytesIO()
    write_tensor_stream(buffer, array, dtype)
    return buffer.getvalue()


def atomic_write_bytes(path: PathLike, payload: bytes) -> None:
    """Write to a sibling temp file, then rename over the target."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except OSError as exc:
        raise SfimIOError(f"cannot write {path}: {exc}") from exc


def save_tensor(path: PathLike, array: np.ndarray, dtype: str = "float64") -> None:
    atomic_write_bytes(path, tensor_bytes(array, dtype))


def load_tensor(path: PathLike) -> np.ndarray:
    return read_tensor_stream(io.BytesIO(read_bytes(path)))


def read_bytes(path: PathLike) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise SfimIOError(f"cannot read {path}: {exc}") from exc
