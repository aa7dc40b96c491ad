from __future__ import annotations

import logging
import math
import time
from typing import Callable, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from scipy.linalg.blas import daxpy

from sketchlu.core.exceptions import Breakdown, DimensionMismatch, InvalidDimensions
from sketchlu.core.linalg import (
    DenseMatrix,
    OperatorLike,
    Spectrum,
    TridiagonalMatrix,
    as_operator,
    frozen,
    orthogonality_defect,
    reorthogonalize,
    tridiag_eig,
)
from sketchlu.core.memory import current_tracker

logger = logging.getLogger("sketchlu.core.lanczos")

EmitFn = Callable[[np.ndarray], None]

BREAKDOWN_TOL = 1e-12
ORTHO_TOL = 1e-8
NEGATIVE_RITZ_TOL = 1e-8


# -------------------------------
# Domain types
# -------------------------------


class LanczosResult(BaseModel):
    """
    Output of a Lanczos run.

    - T: the k_effective × k_effective tridiagonal matrix of recurrence coefficients
    - basis: p × k_effective orthonormal Lanczos vectors (hi-memory only)
    - breakdown_at: iteration index where the Krylov space was exhausted, if any
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    T: TridiagonalMatrix
    basis: Optional[np.ndarray] = None
    k_effective: int
    k_requested: int
    seed: int
    breakdown_at: Optional[int] = None

    @model_validator(mode="after")
    def _check(self) -> "LanczosResult":
        if self.k_effective < 1:
            raise ValueError("k_effective must be >= 1")
        if self.T.k != self.k_effective:
            raise ValueError("T size must equal k_effective")
        if self.basis is not None:
            if self.basis.shape[1] != self.k_effective:
                raise ValueError("basis width must equal k_effective")
            defect = orthogonality_defect(self.basis)
            if defect > ORTHO_TOL:
                raise ValueError(f"hi-memory basis lost orthogonality ({defect:.2e})")
            frozen(self.basis)
        return self

    @property
    def is_low_memory(self) -> bool:
        return self.basis is None


class StreamCollector:
    """
    Emit callback that copies every streamed Lanczos vector into a p×k store.

    Low-memory Lanczos reuses its buffers, so the emitted vector must be copied
    before the next iteration; this collector does that.
    """

    def __init__(self, p: int, k: int) -> None:
        self._store = np.zeros((p, k), order="F")
        self.count = 0

    def __call__(self, v: np.ndarray) -> None:
        self._store[:, self.count] = v
        self.count += 1

    @property
    def vectors(self) -> DenseMatrix:
        return self._store[:, : self.count]


# -------------------------------
# Internal Helpers
# -------------------------------


def initial_vector(p: int, seed: int) -> np.ndarray:
    """Uniform draw from the unit sphere in R^p (normalized Gaussian)."""
    rng = np.random.Generator(np.random.Philox(seed))
    v = rng.standard_normal(p)
    return v / np.linalg.norm(v)


def _matvec(op, v: np.ndarray) -> np.ndarray:
    w = np.asarray(op.matvec(v), dtype=np.float64).reshape(-1)
    return np.ascontiguousarray(w)


def _three_term_step(
    w: np.ndarray,
    v: np.ndarray,
    v_prev: Optional[np.ndarray],
    beta_prev: float,
) -> tuple[float, np.ndarray]:
    # w <- w - α v - β_prev v_prev, with α = <w, v>
    alpha = float(w @ v)
    w = daxpy(v, w, a=-alpha)
    if v_prev is not None and beta_prev != 0.0:
        w = daxpy(v_prev, w, a=-beta_prev)
    return alpha, w


def _log_breakdown(variant: str, i: int, beta: float, gv_norm: float) -> None:
    logger.warning(
        "Lanczos breakdown: Krylov space exhausted",
        extra={"variant": variant, "iteration": i, "beta": beta, "gv_norm": gv_norm},
    )


def _check_dims(op, k: int) -> int:
    if k < 1:
        raise InvalidDimensions(f"Lanczos needs k >= 1, got {k}")
    p, q = op.shape
    if p != q:
        raise DimensionMismatch(f"operator must be square, got {op.shape}")
    return p


# -------------------------------
# Lanczos variants
# -------------------------------


def lanczos_low_memory(
    op: OperatorLike,
    k: int,
    seed: int,
    emit: Optional[EmitFn] = None,
    *,
    strict: bool = False,
) -> LanczosResult:
    """
    Streaming Lanczos: only v_{i-1}, v_i and w = G v_i are resident.

    emit(v_i) is called once per accepted iterate, in order, with a buffer
    that is overwritten by later iterations (copy it to keep it).

    Breakdown (β_i <= 1e-12·‖G v_i‖) stops the run and is reported through
    k_effective; with strict=True it raises Breakdown instead.
    """
    op = as_operator(op)
    p = _check_dims(op, k)
    tracker = current_tracker()
    start = time.perf_counter()

    v = initial_vector(p, seed)
    v_prev = np.zeros(p)
    h_vectors = tracker.allocate("lanczos.v_prev+v", v.nbytes + v_prev.nbytes)
    h_w = tracker.allocate("lanczos.w", v.nbytes)

    alphas: List[float] = []
    betas: List[float] = []
    beta_prev = 0.0
    breakdown_at: Optional[int] = None

    try:
        for i in range(k):
            if emit is not None:
                emit(v)
            w = _matvec(op, v)
            gv_norm = float(np.linalg.norm(w))
            alpha, w = _three_term_step(w, v, v_prev if i else None, beta_prev)
            alphas.append(alpha)
            if i == k - 1:
                break
            beta = float(np.linalg.norm(w))
            if beta <= BREAKDOWN_TOL * gv_norm:
                breakdown_at = i + 1
                _log_breakdown("low_memory", breakdown_at, beta, gv_norm)
                if strict:
                    raise Breakdown(breakdown_at)
                break
            betas.append(beta)
            # reuse the retiring buffer for v_{i+1}
            np.divide(w, beta, out=v_prev)
            v_prev, v = v, v_prev
            beta_prev = beta
    finally:
        tracker.release(h_w)
        tracker.release(h_vectors)

    k_eff = len(alphas)
    logger.info(
        "Low-memory Lanczos finished",
        extra={
            "p": p,
            "k": k,
            "k_effective": k_eff,
            "seed": seed,
            "latency_ms": int((time.perf_counter() - start) * 1000),
        },
    )
    return LanczosResult(
        T=TridiagonalMatrix(diag=alphas, offdiag=betas),
        k_effective=k_eff,
        k_requested=k,
        seed=seed,
        breakdown_at=breakdown_at,
    )


def lanczos_hi_memory(
    op: OperatorLike,
    k: int,
    seed: int,
    *,
    strict: bool = False,
) -> LanczosResult:
    """
    Lanczos with full reorthogonalization (MGS2) of every new vector against
    all stored ones.

    Reorthogonalization starts once vectors outside the three-term window
    exist (iteration 2 onward), so the first two iterations match the
    low-memory variant bit for bit.
    """
    op = as_operator(op)
    p = _check_dims(op, k)
    if k > p:
        raise InvalidDimensions(f"hi-memory Lanczos needs k <= p, got k={k}, p={p}")
    tracker = current_tracker()
    start = time.perf_counter()

    basis = np.zeros((p, k), order="F")
    h_basis = tracker.allocate_array("lanczos.basis", basis)
    h_w = tracker.allocate("lanczos.w", p * 8)
    basis[:, 0] = initial_vector(p, seed)

    alphas: List[float] = []
    betas: List[float] = []
    beta_prev = 0.0
    breakdown_at: Optional[int] = None

    try:
        for i in range(k):
            v = basis[:, i]
            w = _matvec(op, v)
            gv_norm = float(np.linalg.norm(w))
            alpha, w = _three_term_step(w, v, basis[:, i - 1] if i else None, beta_prev)
            alphas.append(alpha)
            if i == k - 1:
                break
            if i >= 2:
                w = reorthogonalize(basis, i + 1, w)
            beta = float(np.linalg.norm(w))
            if beta <= BREAKDOWN_TOL * gv_norm:
                breakdown_at = i + 1
                _log_breakdown("hi_memory", breakdown_at, beta, gv_norm)
                if strict:
                    raise Breakdown(breakdown_at)
                break
            betas.append(beta)
            np.divide(w, beta, out=basis[:, i + 1])
            beta_prev = beta
    finally:
        tracker.release(h_w)
        tracker.release(h_basis)

    k_eff = len(alphas)
    logger.info(
        "Hi-memory Lanczos finished",
        extra={
            "p": p,
            "k": k,
            "k_effective": k_eff,
            "seed": seed,
            "latency_ms": int((time.perf_counter() - start) * 1000),
        },
    )
    return LanczosResult(
        T=TridiagonalMatrix(diag=alphas, offdiag=betas),
        basis=np.asfortranarray(basis[:, :k_eff]),
        k_effective=k_eff,
        k_requested=k,
        seed=seed,
        breakdown_at=breakdown_at,
    )


# -------------------------------
# Eigenpairs
# -------------------------------


def kept_count(k_effective: int, top_fraction: float) -> int:
    """⌈top_fraction · k_effective⌉, at least 1."""
    return max(1, math.ceil(top_fraction * k_effective - 1e-9))


def extract_eigenpairs(
    res: LanczosResult,
    top_fraction: float = 1.0,
    vectors: Optional[DenseMatrix] = None,
) -> Spectrum:
    """
    Diagonalize T = WΛWᵀ and keep the top ⌈top_fraction·k_effective⌉ pairs.

    Eigenvectors are basis·W when a basis is available: the hi-memory basis,
    or `vectors` (e.g. a StreamCollector's copy of a low-memory stream).
    Otherwise the columns of W themselves are returned.
    """
    if not 0.0 < top_fraction <= 1.0:
        raise ValueError(f"top_fraction must lie in (0, 1], got {top_fraction}")

    tri = tridiag_eig(res.T)
    n_keep = kept_count(res.k_effective, top_fraction)
    evals = tri.eigenvalues[:n_keep]
    w = tri.eigenvectors[:, :n_keep]

    lam_max = float(np.max(np.abs(tri.eigenvalues)))
    negative = evals < -NEGATIVE_RITZ_TOL * lam_max
    if np.any(negative):
        logger.warning(
            "Negative Ritz values kept",
            extra={"count": int(negative.sum()), "min": float(evals.min())},
        )

    basis = res.basis if vectors is None else vectors
    if basis is None:
        return Spectrum(eigenvalues=evals, eigenvectors=w)

    if basis.shape[1] != res.k_effective:
        raise DimensionMismatch(
            f"basis has {basis.shape[1]} columns, run has k_effective={res.k_effective}"
        )
    ritz = np.asfortranarray(basis @ w)
    ritz /= np.linalg.norm(ritz, axis=0)
    return Spectrum(eigenvalues=evals, eigenvectors=ritz)


def basis_overlap_heatmap(a: DenseMatrix, b: DenseMatrix) -> DenseMatrix:
    """Matrix of inner products: entry (i, j) = <a[:, i], b[:, j]>."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DimensionMismatch(f"bases must share rows, got {a.shape} and {b.shape}")
    return np.asfortranarray(a.T @ b)


# -------------------------------
# Diagnostics
# -------------------------------


def lanczos_residuals(op: OperatorLike, spectrum: Spectrum) -> np.ndarray:
    """‖G u − λ u‖ per Ritz pair (requires p-dimensional eigenvectors)."""
    op = as_operator(op)
    u = spectrum.eigenvectors
    gu = np.column_stack([_matvec(op, u[:, j]) for j in range(u.shape[1])])
    return np.linalg.norm(gu - u * spectrum.eigenvalues, axis=0)


def tridiagonal_consistency(op: OperatorLike, res: LanczosResult) -> float:
    """‖VᵀGV − T‖_max / ‖T‖_max for a hi-memory run."""
    if res.basis is None:
        raise ValueError("tridiagonal consistency needs a stored basis")
    op = as_operator(op)
    v = res.basis
    gv = np.column_stack([_matvec(op, v[:, j]) for j in range(v.shape[1])])
    t = res.T.to_dense()
    return float(np.max(np.abs(v.T @ gv - t)) / np.max(np.abs(t)))
