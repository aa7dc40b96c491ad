from __future__ import annotations

import logging
import struct
from pathlib import Path
from typing import Union

import numpy as np

from sketchlu.core.exceptions import BadMagic, FormatError, TruncatedFile
from sketchlu.models.mlp import ACTIVATION_IDS, MlpModel, n_params_for

logger = logging.getLogger("sketchlu.repositories.checkpoint_repo")

PathLike = Union[str, Path]

MAGIC = b"MLPC"
VERSION = 1
_HEADER = struct.Struct("<4sIII")


class CheckpointRepo:
    """
    MLPC checkpoint files.

    Layout (little-endian):
      4s   magic "MLPC"
      u32  format version
      u32  activation id (0 tanh, 1 relu)
      u32  number of layer dims
      u32 × n_dims  layer dims [d, h1, ..., t]
      f32 × p       parameters in MlpModel layout

    Parameters are stored as float32 and promoted to float64 on load.
    """

    # -----------------------------
    # Internal Helpers
    # -----------------------------
    @staticmethod
    def _activation_for(code: int):
        for activation, ident in ACTIVATION_IDS.items():
            if ident == code:
                return activation
        raise FormatError(f"unknown activation id {code} in checkpoint")

    @staticmethod
    def encode(model: MlpModel) -> bytes:
        dims = model.layer_dims
        header = _HEADER.pack(MAGIC, VERSION, ACTIVATION_IDS[model.activation], len(dims))
        header += struct.pack(f"<{len(dims)}I", *dims)
        payload = np.asarray(model.params, dtype="<f4").tobytes()
        return header + payload

    def decode(self, buf: bytes, source: str = "<bytes>") -> MlpModel:
        if len(buf) < _HEADER.size:
            raise TruncatedFile(f"{source}: {len(buf)} bytes, too short for an MLPC header")
        magic, version, activation_id, n_dims = _HEADER.unpack_from(buf, 0)
        if magic != MAGIC:
            raise BadMagic(f"{source}: expected magic {MAGIC!r}, found {magic!r}")
        if version != VERSION:
            raise FormatError(f"{source}: unsupported MLPC version {version}")

        offset = _HEADER.size
        if len(buf) < offset + 4 * n_dims:
            raise TruncatedFile(f"{source}: layer dims cut off")
        dims = struct.unpack_from(f"<{n_dims}I", buf, offset)
        offset += 4 * n_dims

        n_params = n_params_for(dims)
        if len(buf) < offset + 4 * n_params:
            raise TruncatedFile(
                f"{source}: payload has {(len(buf) - offset) // 4} floats, dims {dims} need {n_params}"
            )
        params = np.frombuffer(buf, dtype="<f4", count=n_params, offset=offset).astype(np.float64)
        return MlpModel(layer_dims=dims, activation=self._activation_for(activation_id), params=params)

    # -----------------------------
    # Writes
    # -----------------------------
    def save(self, model: MlpModel, path: PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.encode(model))
        logger.info(
            "Checkpoint written",
            extra={"path": str(path), "layer_dims": list(model.layer_dims), "p": model.n_params},
        )
        return path

    # -----------------------------
    # Reads
    # -----------------------------
    def load(self, path: PathLike) -> MlpModel:
        path = Path(path)
        try:
            model = self.decode(path.read_bytes(), str(path))
        except FormatError:
            logger.exception("Unreadable checkpoint", extra={"path": str(path)})
            raise
        logger.info("Checkpoint loaded", extra={"path": str(path), "p": model.n_params})
        return model
