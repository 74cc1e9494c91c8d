# supernet_search/checkpoint.py
"""
TNAS checkpoint files.

Layout (integers little-endian):
    b"TNAS" | version u32 | tensor count u32
    per tensor: name length u32 | UTF-8 name | dtype tag u8 (0=f32, 1=f64)
                | rank u32 | extents u64 x rank | raw little-endian values
"""
import logging
import struct
from pathlib import Path
from typing import BinaryIO, Dict, Mapping, Union

import numpy as np

from supernet_search.errors import FormatError

logger = logging.getLogger(__name__)

MAGIC = b"TNAS"
FORMAT_VERSION = 1
DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
TAG_FOR_DTYPE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def _read_exact(fh: BinaryIO, count: int, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise FormatError(
            f"Truncated checkpoint while reading {what}: wanted {count} bytes, got {len(data)}"
        )
    return data


def save_checkpoint(path: Union[str, Path], tensors: Mapping[str, np.ndarray]) -> Path:
    """Write named float tensors; names are stored in insertion order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(tensors)))
        for name, array in tensors.items():
            array = np.asarray(array)
            if array.dtype not in TAG_FOR_DTYPE:
                raise FormatError(f"Tensor {name!r} has unsupported dtype {array.dtype}")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BI", TAG_FOR_DTYPE[array.dtype], array.ndim))
            fh.write(struct.pack(f"<{array.ndim}Q", *array.shape))
            fh.write(np.ascontiguousarray(array, dtype=array.dtype.newbyteorder("<")).tobytes())
    logger.info("Saved %d tensors to %s", len(tensors), path)
    return path


def load_checkpoint(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    """Read a checkpoint written by save_checkpoint, preserving names, order and dtypes."""
    tensors: Dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != MAGIC:
            raise FormatError(f"Bad checkpoint magic {magic!r}; expected {MAGIC!r}")
        version, count = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != FORMAT_VERSION:
            raise FormatError(f"Unsupported checkpoint version {version}")
        for _ in range(count):
            (name_length,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, name_length, "name").decode("utf-8")
            tag, rank = struct.unpack("<BI", _read_exact(fh, 5, f"{name} dtype/rank"))
            if tag not in DTYPE_TAGS:
                raise FormatError(f"Tensor {name!r} has unknown dtype tag {tag}")
            shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, f"{name} extents"))
            dtype = DTYPE_TAGS[tag]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            values = np.frombuffer(_read_exact(fh, nbytes, f"{name} values"), dtype=dtype)
            tensors[name] = values.reshape(shape).astype(dtype.newbyteorder("="))
        if fh.read(1):
            raise FormatError(f"Trailing bytes after {count} tensors in {path}")
    return tensors
