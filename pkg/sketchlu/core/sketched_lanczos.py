from __future__ import annotations

import logging
import time
from typing import Any, Optional

import numpy as np
from pydantic import ConfigDict, field_validator, model_validator
from scipy.sparse.linalg import LinearOperator

from sketchlu.core.exceptions import CheckedModel, DimensionMismatch, InvalidBasis, InvalidDimensions, RankDeficient
from sketchlu.core.lanczos import extract_eigenpairs, lanczos_hi_memory, lanczos_low_memory
from sketchlu.core.linalg import (
    DenseMatrix,
    OperatorLike,
    as_operator,
    frozen,
    orthogonality_defect,
    qr_orthonormalize,
    tridiag_eig,
)
from sketchlu.core.memory import current_tracker
from sketchlu.core.sketch import SketchOperator

logger = logging.getLogger("sketchlu.core.sketched_lanczos")

ORTHO_TOL = 1e-8


# -------------------------------
# Domain types
# -------------------------------


def _optional_vector(v: Any) -> Optional[np.ndarray]:
    if v is None:
        return None
    return frozen(np.array(v, dtype=np.float64).reshape(-1))


class Preconditioner(CheckedModel):
    """Dense top-k0 eigenbasis used to deflate the operator before sketching."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    U0: np.ndarray
    eigenvalues: Optional[np.ndarray] = None

    @field_validator("U0", mode="before")
    @classmethod
    def _matrix(cls, v: Any) -> np.ndarray:
        return frozen(np.array(v, dtype=np.float64, order="F", ndmin=2))

    @field_validator("eigenvalues", mode="before")
    @classmethod
    def _vector(cls, v: Any) -> Optional[np.ndarray]:
        return _optional_vector(v)

    @model_validator(mode="after")
    def _check(self) -> "Preconditioner":
        if orthogonality_defect(self.U0) > ORTHO_TOL:
            raise InvalidBasis("preconditioner basis U0 must be column-orthonormal")
        if self.eigenvalues is not None and self.eigenvalues.size != self.U0.shape[1]:
            raise InvalidBasis("preconditioner eigenvalues must align with U0 columns")
        return self

    @property
    def k0(self) -> int:
        return int(self.U0.shape[1])


class SketchedBasis(CheckedModel):
    """
    Column-orthonormal sketched basis U_S (out_dim × k) with the sketch that
    produced it.

    Optional parts:
    - eigenvalues: Ritz values of T (and Λ0 first, for the preconditioned variant)
    - preconditioner: the dense (U0, Λ0) block of the preconditioned variant
    - orthogonality_defect: max |CᵀC − I| of the concatenation before its QR
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    U_S: np.ndarray
    sketch: SketchOperator
    k: int
    k_requested: int
    lanczos_seed: int
    eigenvalues: Optional[np.ndarray] = None
    preconditioner: Optional[Preconditioner] = None
    orthogonality_defect: Optional[float] = None

    @field_validator("U_S", mode="before")
    @classmethod
    def _matrix(cls, v: Any) -> np.ndarray:
        return frozen(np.array(v, dtype=np.float64, order="F", ndmin=2))

    @field_validator("eigenvalues", mode="before")
    @classmethod
    def _vector(cls, v: Any) -> Optional[np.ndarray]:
        return _optional_vector(v)

    @model_validator(mode="after")
    def _check(self) -> "SketchedBasis":
        rows, cols = self.U_S.shape
        if rows != self.sketch.out_dim:
            raise InvalidBasis(f"U_S has {rows} rows, sketch produces {self.sketch.out_dim}")
        if cols != self.k:
            raise InvalidBasis(f"U_S has {cols} columns, k={self.k}")
        if orthogonality_defect(self.U_S) > ORTHO_TOL:
            raise InvalidBasis("U_S must be column-orthonormal")
        if self.eigenvalues is not None and self.eigenvalues.size != self.k:
            raise InvalidBasis("eigenvalues must have one entry per basis column")
        return self

    @property
    def k0(self) -> int:
        return 0 if self.preconditioner is None else self.preconditioner.k0


# -------------------------------
# Internal Helpers
# -------------------------------


def _orthonormalize_sketch(cols: DenseMatrix, context: str) -> DenseMatrix:
    try:
        q, _ = qr_orthonormalize(cols)
    except RankDeficient as err:
        logger.exception(
            "Sketched columns collapsed",
            extra={"context": context, "column": err.column, "shape": cols.shape},
        )
        raise RankDeficient(
            err.column,
            f"{context}: sketched column {err.column} of {cols.shape[1]} collapsed "
            f"(sketch rows {cols.shape[0]}); a larger sketch size is needed",
        ) from err
    return q


def derive_seed(seed: int, stream: int) -> int:
    """Independent child seed for a sub-run (e.g. the deflated phase)."""
    state = np.random.SeedSequence([int(seed), int(stream)]).generate_state(1, dtype=np.uint64)
    return int(state[0])


def deflated_operator(op: OperatorLike, u0: DenseMatrix, lam0: np.ndarray) -> LinearOperator:
    """v ↦ G v − U0 (Λ0 ⊙ U0ᵀ v)."""
    op = as_operator(op)
    lam0 = np.asarray(lam0, dtype=np.float64)

    def _mv(v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        gv = np.asarray(op.matvec(v), dtype=np.float64).reshape(-1)
        return gv - u0 @ (lam0 * (u0.T @ v))

    return LinearOperator(shape=op.shape, matvec=_mv, rmatvec=_mv, dtype=np.float64)


# -------------------------------
# Sketched Lanczos
# -------------------------------


def sketched_lanczos(
    op: OperatorLike,
    k: int,
    sk: SketchOperator,
    seed: int,
    *,
    retain_eigenvalues: bool = False,
) -> SketchedBasis:
    """
    Low-memory Lanczos whose iterates are sketched as they stream out.

    Steps:
    - every emitted v_i is written as S v_i into column i of the s×k store V_S
    - the length-p Lanczos vectors are dropped as the recurrence moves on
    - V_S[:, :k_effective] is orthonormalized (QR) into U_S

    Resident buffers: 3 length-p Lanczos vectors, one p_pad transform
    scratch, the sketch's signs/indices and the s×k store.
    """
    op = as_operator(op)
    p = op.shape[0]
    if sk.p != p:
        raise DimensionMismatch(f"sketch is for p={sk.p}, operator has p={p}")
    if k < 1:
        raise InvalidDimensions(f"sketched Lanczos needs k >= 1, got {k}")

    tracker = current_tracker()
    start = time.perf_counter()

    h_sketch = tracker.allocate("sketch.operator", sk.nbytes)
    store = np.zeros((sk.out_dim, k), order="F")
    h_store = tracker.allocate_array("sketch.store", store)
    work = sk.new_workspace(1)
    h_work = tracker.allocate_array("sketch.workspace", work)
    handles = [h_sketch, h_store, h_work]

    written = 0

    def _sketch_and_append(v: np.ndarray) -> None:
        nonlocal written
        sk.apply(v, out=store[:, written], work=work)
        written += 1

    try:
        res = lanczos_low_memory(op, k, seed, emit=_sketch_and_append)
        tracker.release(h_work)
        handles.remove(h_work)

        q = _orthonormalize_sketch(store[:, : res.k_effective], "sketched Lanczos")
        handles.append(tracker.allocate("qr.factors", q.nbytes + res.k_effective**2 * 8))

        eigenvalues = tridiag_eig(res.T).eigenvalues if retain_eigenvalues else None
    finally:
        for handle in handles:
            tracker.release(handle)

    logger.info(
        "Sketched Lanczos finished",
        extra={
            "p": p,
            "s": sk.s,
            "k": k,
            "k_effective": res.k_effective,
            "seed": seed,
            "latency_ms": int((time.perf_counter() - start) * 1000),
        },
    )
    return SketchedBasis(
        U_S=q,
        sketch=sk,
        k=res.k_effective,
        k_requested=k,
        lanczos_seed=seed,
        eigenvalues=eigenvalues,
    )


def preconditioned_sketched_lanczos(
    op: OperatorLike,
    k0: int,
    k1: int,
    sk: SketchOperator,
    seed: int,
    *,
    retain_eigenvalues: bool = False,
) -> SketchedBasis:
    """
    Deflation-preconditioned sketched Lanczos.

    Steps:
    - hi-memory Lanczos for k0 iterations gives the dense pairs (U0, Λ0)
    - sketched Lanczos runs k1 iterations on Ḡ v = G v − U0 Λ0 U0ᵀ v
    - [S U0 | U_S'] is re-orthonormalized; its pre-QR defect is recorded

    k0 = 0 is the plain algorithm. k1 = 0 keeps only the sketched dense part.
    The first phase holds k0·p extra floats.
    """
    if k0 < 0 or k1 < 0 or k0 + k1 < 1:
        raise InvalidDimensions(f"need k0, k1 >= 0 with k0 + k1 >= 1, got ({k0}, {k1})")
    if k0 == 0:
        return sketched_lanczos(op, k1, sk, seed, retain_eigenvalues=retain_eigenvalues)

    op = as_operator(op)
    if sk.p != op.shape[0]:
        raise DimensionMismatch(f"sketch is for p={sk.p}, operator has p={op.shape[0]}")

    tracker = current_tracker()
    hi = lanczos_hi_memory(op, k0, seed)
    spectrum = extract_eigenpairs(hi, 1.0)
    u0 = spectrum.eigenvectors
    lam0 = spectrum.eigenvalues
    h_u0 = tracker.allocate_array("preconditioner.U0", u0)

    try:
        parts = [sk.apply_columns(u0)]
        eig_parts = [lam0]
        if k1 >= 1:
            inner = sketched_lanczos(
                deflated_operator(op, u0, lam0),
                k1,
                sk,
                derive_seed(seed, 1),
                retain_eigenvalues=retain_eigenvalues,
            )
            parts.append(inner.U_S)
            if inner.eigenvalues is not None:
                eig_parts.append(inner.eigenvalues)

        combined = np.asfortranarray(np.hstack(parts))
        defect = orthogonality_defect(combined)
        q = _orthonormalize_sketch(combined, "preconditioned sketched Lanczos")
    finally:
        tracker.release(h_u0)

    logger.info(
        "Preconditioned sketched Lanczos finished",
        extra={"k0": u0.shape[1], "k1": k1, "width": q.shape[1], "defect": defect},
    )
    return SketchedBasis(
        U_S=q,
        sketch=sk,
        k=q.shape[1],
        k_requested=k0 + k1,
        lanczos_seed=seed,
        eigenvalues=np.concatenate(eig_parts) if retain_eigenvalues else None,
        preconditioner=Preconditioner(U0=u0, eigenvalues=lam0),
        orthogonality_defect=defect,
    )
