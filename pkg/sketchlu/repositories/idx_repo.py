from __future__ import annotations

import gzip
import logging
import struct
from pathlib import Path
from typing import Optional, Union

import numpy as np

from sketchlu.core.exceptions import BadMagic, DimensionMismatch, TruncatedFile
from sketchlu.models.dataset import Dataset

logger = logging.getLogger("sketchlu.repositories.idx_repo")

PathLike = Union[str, Path]

UBYTE_TYPE = 0x08
IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


# -----------------------------
# Internal Helpers
# -----------------------------
def _read_bytes(path: Path) -> bytes:
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse(buf: bytes, path: Path) -> np.ndarray:
    """
    IDX layout (big-endian):
      u8 0, u8 0, u8 type (0x08 = unsigned byte), u8 ndim
      ndim × u32 dimension sizes
      raw payload
    """
    if len(buf) < 4:
        raise TruncatedFile(f"{path}: {len(buf)} bytes, too short for an IDX header")
    zero_a, zero_b, dtype_code, ndim = struct.unpack_from(">BBBB", buf, 0)
    if zero_a != 0 or zero_b != 0 or dtype_code != UBYTE_TYPE or ndim == 0:
        magic = struct.unpack_from(">I", buf, 0)[0]
        raise BadMagic(f"{path}: unsupported IDX magic 0x{magic:08x}")

    header_len = 4 + 4 * ndim
    if len(buf) < header_len:
        raise TruncatedFile(f"{path}: header declares {ndim} dims but the file ends early")
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    expected = int(np.prod(dims, dtype=np.int64))
    payload = len(buf) - header_len
    if payload < expected:
        raise TruncatedFile(f"{path}: payload has {payload} bytes, dims {dims} need {expected}")

    return np.frombuffer(buf, dtype=np.uint8, count=expected, offset=header_len).reshape(dims)


def read_idx_array(path: PathLike) -> np.ndarray:
    """Raw uint8 tensor stored in an IDX (optionally gzipped) file."""
    path = Path(path)
    return _parse(_read_bytes(path), path)


# -----------------------------
# Reads
# -----------------------------
def load_idx(
    images_path: PathLike,
    labels_path: Optional[PathLike] = None,
    name: Optional[str] = None,
) -> Dataset:
    """
    Load an IDX image tensor (n × rows × cols, or any rank >= 1) as an n × d
    Dataset with pixels scaled to [0, 1]; labels (rank-1 IDX) become the
    class targets.
    """
    images_path = Path(images_path)
    try:
        images = read_idx_array(images_path)
        n = images.shape[0]
        inputs = images.reshape(n, int(np.prod(images.shape[1:]))).astype(np.float64) / 255.0

        targets = None
        if labels_path is not None:
            labels = read_idx_array(labels_path)
            if labels.ndim != 1:
                raise BadMagic(f"{labels_path}: label files must be rank-1, got rank {labels.ndim}")
            if labels.shape[0] != n:
                raise DimensionMismatch(f"{labels.shape[0]} labels for {n} images")
            targets = labels.astype(np.int64)
    except (BadMagic, TruncatedFile, DimensionMismatch):
        logger.exception("Failed to load IDX data", extra={"images_path": str(images_path)})
        raise

    manifest = {
        "generator": "idx",
        "images_path": str(images_path),
        "labels_path": None if labels_path is None else str(labels_path),
        "image_shape": list(images.shape[1:]),
    }
    logger.info("IDX data loaded", extra={"path": str(images_path), "n": n, "d": inputs.shape[1]})
    return Dataset(
        inputs=inputs,
        targets=targets,
        name=name or images_path.name.split(".")[0],
        manifest=manifest,
    )


# -----------------------------
# Writes
# -----------------------------
def write_idx(path: PathLike, array: np.ndarray) -> Path:
    """Write a uint8 tensor as IDX; gzipped when the name ends in .gz."""
    path = Path(path)
    data = np.ascontiguousarray(array, dtype=np.uint8)
    if data.ndim == 0 or data.ndim > 255:
        raise DimensionMismatch(f"IDX tensors need 1..255 dims, got {data.ndim}")
    header = struct.pack(">BBBB", 0, 0, UBYTE_TYPE, data.ndim)
    header += struct.pack(f">{data.ndim}I", *data.shape)

    path.parent.mkdir(parents=True, exist_ok=True)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes())
    return path
