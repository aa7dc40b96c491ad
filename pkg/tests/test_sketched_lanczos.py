from __future__ import annotations

import numpy as np
import pytest

from sketchlu.core.exceptions import DimensionMismatch, InvalidDimensions
from sketchlu.core.lanczos import StreamCollector, lanczos_low_memory
from sketchlu.core.linalg import orthogonality_defect, qr_orthonormalize
from sketchlu.core.sketch import sketch_new
from sketchlu.core.sketched_lanczos import (
    deflated_operator,
    derive_seed,
    preconditioned_sketched_lanczos,
    sketched_lanczos,
)
from sketchlu.services.data_service import synthetic_fisher
from tests.conftest import philox


class TestSketchedLanczos:
    """Sketch-as-you-stream Lanczos."""

    def test_shape_and_orthonormality(self, small_fisher):
        sk = sketch_new(small_fisher.p, 256, seed=1)
        basis = sketched_lanczos(small_fisher.operator(), 12, sk, seed=2)
        assert basis.U_S.shape == (256, 12)
        assert basis.k == basis.k_requested == 12
        assert orthogonality_defect(basis.U_S) <= 1e-8
        assert basis.preconditioner is None
        assert basis.k0 == 0

    def test_bit_reproducible(self, small_fisher):
        sk = sketch_new(small_fisher.p, 128, seed=3)
        a = sketched_lanczos(small_fisher.operator(), 10, sk, seed=4)
        b = sketched_lanczos(small_fisher.operator(), 10, sk, seed=4)
        np.testing.assert_array_equal(a.U_S, b.U_S)

    def test_sketch_of_stream(self, small_fisher):
        op = small_fisher.operator()
        sk = sketch_new(small_fisher.p, 128, seed=5)
        collector = StreamCollector(small_fisher.p, 8)
        lanczos_low_memory(op, 8, seed=6, emit=collector)
        expected, _ = qr_orthonormalize(sk.apply_columns(collector.vectors))
        basis = sketched_lanczos(op, 8, sk, seed=6)
        np.testing.assert_allclose(basis.U_S, expected, atol=1e-12)

    def test_retained_eigenvalues(self, small_fisher):
        sk = sketch_new(small_fisher.p, 128, seed=5)
        basis = sketched_lanczos(small_fisher.operator(), 21, sk, seed=7, retain_eigenvalues=True)
        assert basis.eigenvalues.shape == (basis.k,)
        assert basis.eigenvalues[0] == pytest.approx(small_fisher.lambdas[0], rel=1e-8)

    def test_sketch_dimension_checked(self, small_fisher):
        with pytest.raises(DimensionMismatch):
            sketched_lanczos(small_fisher.operator(), 5, sketch_new(100, 16, seed=0), seed=0)

    def test_projection_norms_match_dense_basis(self):
        p, k, s = 4096, 16, 1024
        sf = synthetic_fisher(p, 64, 0.9, seed=8)
        op = sf.operator()
        sk = sketch_new(p, s, seed=9)
        basis = sketched_lanczos(op, k, sk, seed=10)
        collector = StreamCollector(p, k)
        lanczos_low_memory(op, k, seed=10, emit=collector)
        u, _ = qr_orthonormalize(collector.vectors)

        rng = philox(11)
        hits = 0
        for _ in range(200):
            v = rng.standard_normal(p)
            v /= np.linalg.norm(v)
            err = abs(np.linalg.norm(basis.U_S.T @ sk.apply(v)) - np.linalg.norm(u.T @ v))
            hits += err <= 0.15
        assert hits >= 190


class TestPreconditionedSketchedLanczos:
    """Deflation-preconditioned variant."""

    def test_k0_zero_is_plain(self, small_fisher):
        sk = sketch_new(small_fisher.p, 128, seed=1)
        plain = sketched_lanczos(small_fisher.operator(), 9, sk, seed=2)
        split = preconditioned_sketched_lanczos(small_fisher.operator(), 0, 9, sk, seed=2)
        np.testing.assert_array_equal(plain.U_S, split.U_S)
        assert split.preconditioner is None

    def test_split_fields(self, small_fisher):
        sk = sketch_new(small_fisher.p, 256, seed=3)
        basis = preconditioned_sketched_lanczos(
            small_fisher.operator(), 5, 10, sk, seed=4, retain_eigenvalues=True
        )
        assert basis.k0 == 5
        assert basis.k == 15
        assert basis.k_requested == 15
        assert basis.U_S.shape == (256, 15)
        assert orthogonality_defect(basis.U_S) <= 1e-8
        assert basis.orthogonality_defect is not None
        assert basis.preconditioner.eigenvalues.shape == (5,)
        assert basis.eigenvalues.shape == (15,)
        np.testing.assert_array_equal(basis.eigenvalues[:5], basis.preconditioner.eigenvalues)

    def test_dense_only_split_spans_sketched_preconditioner(self, small_fisher):
        sk = sketch_new(small_fisher.p, 256, seed=5)
        basis = preconditioned_sketched_lanczos(small_fisher.operator(), 6, 0, sk, seed=6)
        su0 = sk.apply_columns(basis.preconditioner.U0)
        residual = su0 - basis.U_S @ (basis.U_S.T @ su0)
        assert np.max(np.abs(residual)) <= 1e-10
        assert basis.k == 6

    def test_deflated_operator_removes_pairs(self, small_fisher):
        v0 = small_fisher.V[:, :3]
        op = deflated_operator(small_fisher.operator(), v0, small_fisher.lambdas[:3])
        for j in range(3):
            assert np.linalg.norm(op.matvec(v0[:, j])) <= 1e-12
        np.testing.assert_allclose(
            op.matvec(small_fisher.V[:, 4]), small_fisher.lambdas[4] * small_fisher.V[:, 4], atol=1e-12
        )

    @pytest.mark.parametrize("k0, k1", [(0, 0), (-1, 3), (2, -1)])
    def test_invalid_split(self, small_fisher, k0, k1):
        sk = sketch_new(small_fisher.p, 64, seed=0)
        with pytest.raises(InvalidDimensions):
            preconditioned_sketched_lanczos(small_fisher.operator(), k0, k1, sk, seed=0)

    def test_child_seeds_independent(self):
        assert derive_seed(0, 1) != derive_seed(0, 2)
        assert derive_seed(0, 1) == derive_seed(0, 1)
