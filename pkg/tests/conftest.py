from __future__ import annotations

import numpy as np
import pytest
from scipy.sparse.linalg import LinearOperator, aslinearoperator

from sketchlu.core.linalg import qr_orthonormalize
from sketchlu.models.mlp import MlpModel, init_mlp
from sketchlu.services.data_service import synthetic_fisher, two_gaussian_task


def philox(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def decaying_operator(p: int, decay: float, seed: int) -> tuple[LinearOperator, np.ndarray]:
    """Dense symmetric Q diag(decay^i) Qᵀ with a random orthogonal Q; returns (op, eigenvalues)."""
    q, _ = np.linalg.qr(philox(seed).standard_normal((p, p)))
    lam = decay ** np.arange(p, dtype=np.float64)
    dense = (q * lam) @ q.T
    return aslinearoperator((dense + dense.T) / 2.0), lam


def diagonal_operator(diagonal: np.ndarray) -> LinearOperator:
    diagonal = np.asarray(diagonal, dtype=np.float64)
    return LinearOperator(
        shape=(diagonal.size, diagonal.size),
        matvec=lambda v: diagonal * np.asarray(v).reshape(-1),
        rmatvec=lambda v: diagonal * np.asarray(v).reshape(-1),
        dtype=np.float64,
    )


def random_orthonormal(p: int, k: int, seed: int) -> np.ndarray:
    u, _ = qr_orthonormalize(philox(seed).standard_normal((p, k)))
    return u


@pytest.fixture
def rng() -> np.random.Generator:
    return philox(1234)


@pytest.fixture
def tiny_model() -> MlpModel:
    """2-4-3 tanh network (p = 27)."""
    return init_mlp((2, 4, 3), "tanh", seed=3)


@pytest.fixture
def tiny_inputs() -> np.ndarray:
    return philox(11).standard_normal((10, 2))


@pytest.fixture
def small_fisher():
    return synthetic_fisher(600, 20, 0.9, seed=5)


@pytest.fixture
def gaussian_task():
    return two_gaussian_task(d=4, n=200, shift=6.0, seed=0)
