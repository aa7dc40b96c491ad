from __future__ import annotations

import logging
from typing import Any, Tuple, Union

import numpy as np
import scipy.linalg
from pydantic import BaseModel, ConfigDict, field_validator, model_validator
from scipy.linalg.blas import daxpy
from scipy.sparse.linalg import LinearOperator, aslinearoperator

from sketchlu.core.exceptions import ConvergenceFailure, DimensionMismatch, RankDeficient

logger = logging.getLogger("sketchlu.core.linalg")

# 2-D float64 array, column-major. Kept as a plain ndarray so it flows through
# numpy/scipy without wrapping.
DenseMatrix = np.ndarray

OperatorLike = Union[LinearOperator, np.ndarray]

RANK_TOL = 1e-12
UNIT_NORM_TOL = 1e-10

# -------------------------------
# Array helpers
# -------------------------------


def as_dense(a: Any, name: str = "matrix") -> DenseMatrix:
    """Coerce to a finite, Fortran-ordered float64 2-D array."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return np.asfortranarray(arr)


def frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


def as_operator(op: OperatorLike) -> LinearOperator:
    return op if isinstance(op, LinearOperator) else aslinearoperator(op)


def orthogonality_defect(q: DenseMatrix) -> float:
    """max |QᵀQ − I|; 0 for an empty basis."""
    if q.shape[1] == 0:
        return 0.0
    gram = q.T @ q
    return float(np.max(np.abs(gram - np.eye(q.shape[1]))))


def reorthogonalize(basis: DenseMatrix, ncols: int, v: np.ndarray) -> np.ndarray:
    """
    Two passes of modified Gram-Schmidt of v against basis[:, :ncols].

    v is updated in place when it is a contiguous float64 vector; the
    returned array is always the result.
    """
    for _ in range(2):
        for i in range(ncols):
            q = basis[:, i]
            v = daxpy(q, v, a=-float(q @ v))
    return v


# -------------------------------
# Domain types
# -------------------------------


class TridiagonalMatrix(BaseModel):
    """Symmetric tridiagonal T stored as its diagonal and single off-diagonal."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    diag: np.ndarray
    offdiag: np.ndarray

    @field_validator("diag", "offdiag", mode="before")
    @classmethod
    def _to_float_vector(cls, v: Any) -> np.ndarray:
        arr = np.array(v, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tridiagonal entries must be finite")
        return frozen(arr)

    @model_validator(mode="after")
    def _check_lengths(self) -> "TridiagonalMatrix":
        if self.diag.size < 1:
            raise ValueError("tridiagonal matrix needs k >= 1")
        if self.offdiag.size != self.diag.size - 1:
            raise ValueError(
                f"offdiag length {self.offdiag.size} != k-1 = {self.diag.size - 1}"
            )
        return self

    @property
    def k(self) -> int:
        return int(self.diag.size)

    def to_dense(self) -> DenseMatrix:
        t = np.diag(self.diag)
        if self.k > 1:
            t += np.diag(self.offdiag, 1) + np.diag(self.offdiag, -1)
        return np.asfortranarray(t)


class Spectrum(BaseModel):
    """Eigenvalues in descending order with aligned unit-norm eigenvector columns."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @field_validator("eigenvalues", mode="before")
    @classmethod
    def _to_vector(cls, v: Any) -> np.ndarray:
        return frozen(np.array(v, dtype=np.float64).reshape(-1))

    @field_validator("eigenvectors", mode="before")
    @classmethod
    def _to_matrix(cls, v: Any) -> np.ndarray:
        return frozen(np.array(as_dense(v, "eigenvectors"), order="F"))

    @model_validator(mode="after")
    def _check(self) -> "Spectrum":
        if self.eigenvectors.shape[1] != self.eigenvalues.size:
            raise ValueError("eigenvector columns must align with eigenvalues")
        if np.any(np.diff(self.eigenvalues) > 0):
            raise ValueError("eigenvalues must be sorted descending")
        norms = np.linalg.norm(self.eigenvectors, axis=0)
        if norms.size and np.max(np.abs(norms - 1.0)) > UNIT_NORM_TOL:
            raise ValueError("eigenvector columns must be unit-norm")
        return self

    def __len__(self) -> int:
        return int(self.eigenvalues.size)


# -------------------------------
# Orthogonalization
# -------------------------------


def qr_orthonormalize(a: Any) -> Tuple[DenseMatrix, DenseMatrix]:
    """
    Thin QR factorization A = QR by modified Gram-Schmidt with one
    reorthogonalization pass (MGS2).

    Returns:
    - Q (m×n) with orthonormal columns, Fortran-ordered
    - R (n×n) upper-triangular with positive diagonal

    Raises RankDeficient(j) when column j's residual after both passes drops
    below 1e-12 times its input norm (or the column is zero).
    """
    a = as_dense(a, "A")
    m, n = a.shape
    q = np.zeros((m, n), order="F")
    r = np.zeros((n, n), order="F")

    for j in range(n):
        w = a[:, j].copy()
        norm_in = float(np.linalg.norm(w))
        for _ in range(2):
            for i in range(j):
                c = float(q[:, i] @ w)
                r[i, j] += c
                w = daxpy(q[:, i], w, a=-c)
        resid = float(np.linalg.norm(w))
        if norm_in == 0.0 or resid <= RANK_TOL * norm_in:
            raise RankDeficient(
                j,
                f"column {j} collapsed during orthogonalization "
                f"(residual {resid:.3e}, input norm {norm_in:.3e})",
            )
        r[j, j] = resid
        q[:, j] = w / resid

    return q, r


# -------------------------------
# Tridiagonal eigensolver
# -------------------------------


def _fix_signs(w: np.ndarray) -> np.ndarray:
    # first component with |x| > 1e-14 is made positive
    for j in range(w.shape[1]):
        nz = np.flatnonzero(np.abs(w[:, j]) > 1e-14)
        if nz.size and w[nz[0], j] < 0:
            w[:, j] *= -1.0
    return w


def tridiag_eig(t: TridiagonalMatrix) -> Spectrum:
    """
    All eigenpairs of a symmetric tridiagonal matrix, descending.

    Uses LAPACK's implicit QL/QR (``stev``) through scipy; a non-converged
    LAPACK call surfaces as ConvergenceFailure.
    """
    if t.k == 1:
        return Spectrum(eigenvalues=t.diag.copy(), eigenvectors=np.ones((1, 1)))

    try:
        evals, evecs = scipy.linalg.eigh_tridiagonal(
            t.diag, t.offdiag, lapack_driver="stev"
        )
    except np.linalg.LinAlgError as err:
        logger.exception("Tridiagonal eigensolver failed", extra={"k": t.k})
        raise ConvergenceFailure(f"tridiagonal eigensolver failed for k={t.k}") from err

    order = np.argsort(evals)[::-1]
    evecs = _fix_signs(np.asfortranarray(evecs[:, order]))
    return Spectrum(eigenvalues=evals[order], eigenvectors=evecs)


# -------------------------------
# Norms
# -------------------------------


def operator_norm(op: OperatorLike, p: int, iters: int, seed: int) -> float:
    """
    Largest singular value of a symmetric operator by power iteration on AᵀA.

    The estimate ‖A x‖ with x the current unit iterate is non-decreasing in
    the iteration count; the start vector is a seeded Gaussian draw.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    op = as_operator(op)
    if op.shape != (p, p):
        raise DimensionMismatch(f"operator shape {op.shape} != ({p}, {p})")

    rng = np.random.Generator(np.random.Philox(seed))
    x = rng.standard_normal(p)
    x /= np.linalg.norm(x)

    estimate = 0.0
    for _ in range(iters):
        y = np.asarray(op.matvec(x), dtype=np.float64).reshape(-1)
        estimate = float(np.linalg.norm(y))
        z = np.asarray(op.matvec(y), dtype=np.float64).reshape(-1)
        z_norm = float(np.linalg.norm(z))
        if z_norm == 0.0:
            break
        x = z / z_norm
    return estimate


def frobenius_norm_sq(a: Any) -> float:
    """Σ entries² with numpy's pairwise summation over the flattened array."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.size == 0:
        return 0.0
    flat = arr.ravel(order="K")
    return float(np.sum(flat * flat))
