# supernet_search/idx_loader.py
"""
IDX files (the MNIST / Fashion-MNIST container).

Header: big-endian u32 magic (0x0000 | type code 0x08 for unsigned bytes |
rank), then one big-endian u32 extent per axis, then the payload. Files
ending in .gz are read through gzip.
"""
import gzip
import logging
import struct
from pathlib import Path
from typing import Union

import numpy as np

from supernet_search.errors import ConsistencyError, FormatError, ValidationError
from supernet_search.training import ArrayDataset

logger = logging.getLogger(__name__)

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
UBYTE_CODE = 0x08

PathLike = Union[str, Path]


def _open(path: PathLike, mode: str):
    return gzip.open(path, mode) if str(path).endswith(".gz") else open(path, mode)


def read_idx(path: PathLike, expected_magic: int = None) -> np.ndarray:
    """
    Raises:
        FormatError: bad magic or unsupported element type
        ConsistencyError: payload shorter or longer than the header promises
    """
    with _open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4:
        raise FormatError(f"{path}: file too short for an IDX header ({len(data)} bytes)")
    (magic,) = struct.unpack(">I", data[:4])
    if expected_magic is not None and magic != expected_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if magic >> 16 != 0 or (magic >> 8) & 0xFF != UBYTE_CODE:
        raise FormatError(
            f"{path}: bad magic 0x{magic:08x}; only unsigned-byte IDX files are supported"
        )
    rank = magic & 0xFF
    header = 4 + 4 * rank
    if len(data) < header:
        raise ConsistencyError(f"{path}: truncated header, {rank} extents announced")
    shape = struct.unpack(f">{rank}I", data[4:header])
    expected = int(np.prod(shape, dtype=np.int64))
    payload = len(data) - header
    if payload != expected:
        raise ConsistencyError(
            f"{path}: header announces {expected} bytes of data for shape {shape}, found {payload}"
        )
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(shape)


def write_idx(path: PathLike, array: np.ndarray) -> Path:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ValidationError(f"IDX writer stores unsigned bytes only, got {array.dtype}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    magic = (UBYTE_CODE << 8) | array.ndim
    with _open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(np.ascontiguousarray(array).tobytes())
    return path


def load_idx_images(
    images_path: PathLike, labels_path: PathLike, num_classes: int = 10
) -> ArrayDataset:
    """
    Grayscale images as [N, 1, H, W] floats in [0, 1] with int64 labels.

    Raises:
        FormatError: wrong magic in either file
        ConsistencyError: truncated payload or image/label count mismatch
        ValidationError: a label outside [0, num_classes)
    """
    images = read_idx(images_path, IMAGES_MAGIC)
    labels = read_idx(labels_path, LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise ConsistencyError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if labels.size and int(labels.max()) >= num_classes:
        raise ValidationError(
            f"Label {int(labels.max())} outside [0, {num_classes - 1}] for {num_classes} classes"
        )
    count, height, width = images.shape
    logger.info("Loaded %d images of %dx%d from %s", count, height, width, images_path)
    return ArrayDataset(images[:, None, :, :].astype(np.float64) / 255.0, labels.astype(np.int64))
