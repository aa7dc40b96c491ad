from __future__ import annotations

import logging
import math
import struct
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from sketchlu.core.exceptions import BadMagic, FormatError, InvalidBasis, MissingField, TruncatedFile
from sketchlu.core.sketch import SketchMetadata, sketch_from_metadata
from sketchlu.core.sketched_lanczos import Preconditioner, SketchedBasis

logger = logging.getLogger("sketchlu.repositories.basis_repo")

PathLike = Union[str, Path]

MAGIC = b"SKLB"
VERSION = 1

FLAG_EIGENVALUES = 1 << 0
FLAG_PRECOND_BASIS = 1 << 1
FLAG_PRECOND_EIGENVALUES = 1 << 2

# magic, version, p, s, out_dim, k, k0, lanczos seed, flags, sketch seed,
# prng id, transform id, orthogonality defect (NaN when not recorded)
_HEADER = struct.Struct("<4sIQIIIIQIQ16s8sd")


def _text(raw: bytes) -> str:
    return raw.rstrip(b"\x00").decode("ascii")


class BasisRepo:
    """
    SKLB files holding a SketchedBasis.

    A fixed little-endian header is followed by float64 payloads, in order:
    U_S (out_dim × k, column-major), eigenvalues (k), U0 (p × k0,
    column-major), Λ0 (k0). Optional blocks are present when their flag bit
    is set. The sketch itself is regenerated from its persisted metadata.
    """

    # -----------------------------
    # Internal Helpers
    # -----------------------------
    @staticmethod
    def _read_block(buf: bytes, offset: int, count: int, what: str, source: str) -> Tuple[np.ndarray, int]:
        end = offset + 8 * count
        if len(buf) < end:
            raise TruncatedFile(f"{source}: {what} block cut off ({len(buf) - offset} of {8 * count} bytes)")
        return np.frombuffer(buf, dtype="<f8", count=count, offset=offset).astype(np.float64), end

    def encode(self, basis: SketchedBasis, include_eigenvalues: bool = True) -> bytes:
        sk = basis.sketch
        pre = basis.preconditioner
        flags = 0
        if include_eigenvalues and basis.eigenvalues is not None:
            flags |= FLAG_EIGENVALUES
        if pre is not None:
            flags |= FLAG_PRECOND_BASIS
            if include_eigenvalues and pre.eigenvalues is not None:
                flags |= FLAG_PRECOND_EIGENVALUES

        defect = math.nan if basis.orthogonality_defect is None else float(basis.orthogonality_defect)
        header = _HEADER.pack(
            MAGIC,
            VERSION,
            sk.p,
            sk.s,
            sk.out_dim,
            basis.k,
            basis.k0,
            basis.lanczos_seed,
            flags,
            sk.seed,
            sk.prng_id.encode("ascii"),
            sk.transform_id.encode("ascii"),
            defect,
        )
        parts = [header, np.asarray(basis.U_S, dtype="<f8").tobytes(order="F")]
        if flags & FLAG_EIGENVALUES:
            parts.append(np.asarray(basis.eigenvalues, dtype="<f8").tobytes())
        if flags & FLAG_PRECOND_BASIS:
            parts.append(np.asarray(pre.U0, dtype="<f8").tobytes(order="F"))
        if flags & FLAG_PRECOND_EIGENVALUES:
            parts.append(np.asarray(pre.eigenvalues, dtype="<f8").tobytes())
        return b"".join(parts)

    def decode(self, buf: bytes, source: str = "<bytes>") -> SketchedBasis:
        if len(buf) < 4 or buf[:4] != MAGIC:
            raise BadMagic(f"{source}: expected magic {MAGIC!r}, found {buf[:4]!r}")
        if len(buf) < _HEADER.size:
            raise TruncatedFile(f"{source}: {len(buf)} bytes, too short for an SKLB header")
        (
            _,
            version,
            p,
            s,
            out_dim,
            k,
            k0,
            lanczos_seed,
            flags,
            sketch_seed,
            prng_id,
            transform_id,
            defect,
        ) = _HEADER.unpack_from(buf, 0)
        if version != VERSION:
            raise FormatError(f"{source}: unsupported SKLB version {version}")

        sketch = sketch_from_metadata(
            SketchMetadata(p=p, s=s, seed=sketch_seed, prng_id=_text(prng_id), transform_id=_text(transform_id))
        )
        if sketch.out_dim != out_dim:
            raise FormatError(f"{source}: header out_dim {out_dim} disagrees with the sketch ({sketch.out_dim})")

        offset = _HEADER.size
        u_s, offset = self._read_block(buf, offset, out_dim * k, "U_S", source)
        eigenvalues: Optional[np.ndarray] = None
        if flags & FLAG_EIGENVALUES:
            eigenvalues, offset = self._read_block(buf, offset, k, "eigenvalues", source)

        u0: Optional[np.ndarray] = None
        lam0: Optional[np.ndarray] = None
        if flags & FLAG_PRECOND_BASIS:
            u0, offset = self._read_block(buf, offset, p * k0, "U0", source)
            if flags & FLAG_PRECOND_EIGENVALUES:
                lam0, offset = self._read_block(buf, offset, k0, "preconditioner eigenvalues", source)

        try:
            preconditioner = None
            if u0 is not None:
                preconditioner = Preconditioner(U0=u0.reshape((p, k0), order="F"), eigenvalues=lam0)
            return SketchedBasis(
                U_S=u_s.reshape((out_dim, k), order="F"),
                sketch=sketch,
                k=k,
                k_requested=k,
                lanczos_seed=lanczos_seed,
                eigenvalues=eigenvalues,
                preconditioner=preconditioner,
                orthogonality_defect=None if math.isnan(defect) else defect,
            )
        except InvalidBasis as exc:
            raise FormatError(f"{source}: {exc}") from exc

    # -----------------------------
    # Writes
    # -----------------------------
    def save(self, basis: SketchedBasis, path: PathLike, include_eigenvalues: bool = True) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.encode(basis, include_eigenvalues=include_eigenvalues))
        logger.info(
            "Basis written",
            extra={
                "path": str(path),
                "p": basis.sketch.p,
                "s": basis.sketch.s,
                "k": basis.k,
                "k0": basis.k0,
                "eigenvalues": include_eigenvalues,
            },
        )
        return path

    # -----------------------------
    # Reads
    # -----------------------------
    def load(self, path: PathLike) -> SketchedBasis:
        path = Path(path)
        try:
            basis = self.decode(path.read_bytes(), str(path))
        except FormatError:
            logger.exception("Unreadable basis file", extra={"path": str(path)})
            raise
        logger.info("Basis loaded", extra={"path": str(path), "k": basis.k, "k0": basis.k0})
        return basis

    @staticmethod
    def require_dense(basis: SketchedBasis, need_eigenvalues: bool) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        """The dense preconditioner block (U0, Λ0) used by the le_exact / lla baselines."""
        pre = basis.preconditioner
        if pre is None:
            raise MissingField("U0", "basis file has no dense preconditioner block (U0); precompute with k0 >= 1")
        if need_eigenvalues and pre.eigenvalues is None:
            raise MissingField(
                "eigenvalues",
                "basis file has no eigenvalues; precompute with --use-eigenvals",
            )
        return pre.U0, pre.eigenvalues
