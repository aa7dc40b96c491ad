from __future__ import annotations

import logging
import math
from typing import Any, Literal, Optional

import numpy as np
import scipy.fft
from pydantic import BaseModel, ConfigDict, Field, field_validator

from sketchlu.core.exceptions import DimensionMismatch, FormatError, InvalidDimensions
from sketchlu.core.linalg import DenseMatrix, frozen

logger = logging.getLogger("sketchlu.core.sketch")

# Counter-based, splittable generator; recorded in every persisted sketch.
PRNG_ID = "philox4x64-np"

TransformId = Literal["wht", "dft"]


def next_pow2(p: int) -> int:
    return 1 << max(0, int(p) - 1).bit_length()


def sketch_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


# -------------------------------
# Fast transforms
# -------------------------------


def fwht_inplace(buf: np.ndarray) -> np.ndarray:
    """
    Orthonormal fast Walsh-Hadamard transform along axis 0 of a C-contiguous
    (n, m) buffer, n a power of two. Butterflies run in place, column-wise.
    """
    n = buf.shape[0]
    h = 1
    while h < n:
        view = buf.reshape(n // (2 * h), 2, h, -1)
        a = view[:, 0]
        b = view[:, 1]
        a += b
        b *= -2.0
        b += a
        h *= 2
    buf *= 1.0 / math.sqrt(n)
    return buf


# -------------------------------
# Domain types
# -------------------------------


class SketchMetadata(BaseModel):
    """The persisted identity of a sketch; signs/indices are regenerated from it."""

    model_config = ConfigDict(frozen=True)

    p: int = Field(..., ge=1)
    s: int = Field(..., ge=1)
    seed: int = Field(..., ge=0)
    prng_id: str = PRNG_ID
    transform_id: TransformId = "wht"


class SketchOperator(BaseModel):
    """
    Seeded subsampled randomized orthogonal transform S: R^p -> R^s.

    S v = scale · P · H · D · pad(v), with D the Rademacher sign diagonal, H the
    orthonormal Walsh-Hadamard (or unitary DFT) transform on p_pad = 2^⌈log2 p⌉
    entries, P the selection of s rows and scale = sqrt(p_pad / s), so that
    E‖Sv‖² = ‖v‖².
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    p: int
    p_pad: int
    s: int
    seed: int
    rademacher_signs: np.ndarray
    sample_indices: np.ndarray
    scale: float
    transform_id: TransformId = "wht"
    prng_id: str = PRNG_ID

    @field_validator("rademacher_signs", "sample_indices", mode="after")
    @classmethod
    def _freeze(cls, v: np.ndarray) -> np.ndarray:
        return frozen(v)

    # -----------------------------
    # Shape
    # -----------------------------
    @property
    def out_dim(self) -> int:
        """Rows of the real output: s for WHT, 2s ([Re; Im]) for DFT."""
        return self.s if self.transform_id == "wht" else 2 * self.s

    @property
    def nbytes(self) -> int:
        return int(self.rademacher_signs.nbytes + self.sample_indices.nbytes)

    def metadata(self) -> SketchMetadata:
        return SketchMetadata(
            p=self.p,
            s=self.s,
            seed=self.seed,
            prng_id=self.prng_id,
            transform_id=self.transform_id,
        )

    def new_workspace(self, m: int = 1) -> np.ndarray:
        """Scratch buffer of p_pad × m floats for repeated applications."""
        return np.zeros((self.p_pad, m), order="C")

    # -----------------------------
    # Application
    # -----------------------------
    def _mix(self, a: np.ndarray, work: np.ndarray) -> np.ndarray:
        # work[:p] = D a, tail zero, then orthonormal transform
        p = self.p
        np.multiply(a, self.rademacher_signs[:p, None], out=work[:p])
        work[p:] = 0.0
        if self.transform_id == "wht":
            return fwht_inplace(work)
        return scipy.fft.fft(work, axis=0, norm="ortho")

    def _select(self, mixed: np.ndarray, out: np.ndarray) -> np.ndarray:
        picked = mixed[self.sample_indices]
        if self.transform_id == "wht":
            np.multiply(picked, self.scale, out=out)
        else:
            np.multiply(picked.real, self.scale, out=out[: self.s])
            np.multiply(picked.imag, self.scale, out=out[self.s :])
        return out

    def apply_columns(
        self,
        a: Any,
        out: Optional[np.ndarray] = None,
        work: Optional[np.ndarray] = None,
    ) -> DenseMatrix:
        """Sketch every column of a p×m matrix; returns out_dim×m."""
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != self.p:
            raise DimensionMismatch(
                f"sketch expects {self.p} rows, got array of shape {a.shape}"
            )
        m = a.shape[1]
        if m == 0:
            return np.zeros((self.out_dim, 0), order="F")
        if work is None or work.shape != (self.p_pad, m):
            work = self.new_workspace(m)
        if out is None:
            out = np.zeros((self.out_dim, m), order="F")
        mixed = self._mix(a, work)
        return self._select(mixed, out)

    def apply(
        self,
        v: Any,
        out: Optional[np.ndarray] = None,
        work: Optional[np.ndarray] = None,
    ) -> np.ndarray:
        """Sketch a single vector; same arithmetic as the column path."""
        v = np.asarray(v, dtype=np.float64)
        if v.ndim != 1 or v.shape[0] != self.p:
            raise DimensionMismatch(
                f"sketch expects a vector of length {self.p}, got shape {v.shape}"
            )
        target = None if out is None else out.reshape(-1, 1)
        res = self.apply_columns(v.reshape(-1, 1), out=target, work=work)
        return res.reshape(-1) if out is None else out


# -------------------------------
# Construction
# -------------------------------


def sketch_new(p: int, s: int, seed: int, transform: TransformId = "wht") -> SketchOperator:
    """
    Build the sketch determined by (p, s, seed, transform).

    Signs are i.i.d. uniform ±1 and the s row indices are drawn uniformly
    without replacement from [0, p_pad), both from Philox(seed).
    """
    if p < 1:
        raise InvalidDimensions(f"ambient dimension p must be >= 1, got {p}")
    p_pad = next_pow2(p)
    if s < 1 or s > p_pad:
        raise InvalidDimensions(f"sketch size s={s} must lie in [1, p_pad={p_pad}]")
    if seed < 0:
        raise InvalidDimensions(f"sketch seed must be non-negative, got {seed}")
    if transform not in ("wht", "dft"):
        raise InvalidDimensions(f"unknown sketch transform {transform!r}")

    rng = sketch_rng(seed)
    signs = rng.integers(0, 2, size=p_pad, dtype=np.int8)
    signs = (signs * 2 - 1).astype(np.int8)
    indices = np.sort(rng.choice(p_pad, size=s, replace=False)).astype(np.int64)

    logger.debug(
        "Sketch operator built",
        extra={"p": p, "p_pad": p_pad, "s": s, "seed": seed, "transform": transform},
    )

    return SketchOperator(
        p=p,
        p_pad=p_pad,
        s=s,
        seed=seed,
        rademacher_signs=signs,
        sample_indices=indices,
        scale=math.sqrt(p_pad / s),
        transform_id=transform,
    )


def sketch_from_metadata(meta: SketchMetadata) -> SketchOperator:
    if meta.prng_id != PRNG_ID:
        raise FormatError(
            f"sketch was generated with PRNG {meta.prng_id!r}; this build provides {PRNG_ID!r}"
        )
    return sketch_new(meta.p, meta.s, meta.seed, transform=meta.transform_id)


def sketch_apply(sk: SketchOperator, v: Any) -> np.ndarray:
    return sk.apply(v)


def sketch_apply_columns(sk: SketchOperator, a: Any) -> DenseMatrix:
    return sk.apply_columns(a)
