from __future__ import annotations

import numpy as np
import pytest
import scipy.linalg

from sketchlu.core.exceptions import DimensionMismatch, FormatError, InvalidDimensions
from sketchlu.core.sketch import (
    SketchMetadata,
    fwht_inplace,
    next_pow2,
    sketch_apply,
    sketch_apply_columns,
    sketch_from_metadata,
    sketch_new,
)
from tests.conftest import philox, random_orthonormal


class TestTransforms:
    """Padding and the fast Walsh-Hadamard transform."""

    @pytest.mark.parametrize("p, expected", [(1, 1), (2, 2), (3, 4), (1000, 1024), (4096, 4096), (4097, 8192)])
    def test_next_pow2(self, p, expected):
        assert next_pow2(p) == expected

    def test_fwht_matches_hadamard_matrix(self):
        a = philox(0).standard_normal((16, 3))
        expected = scipy.linalg.hadamard(16) @ a / 4.0
        out = fwht_inplace(np.ascontiguousarray(a.copy()))
        np.testing.assert_allclose(out, expected, atol=1e-13)

    def test_fwht_is_involution(self):
        a = philox(1).standard_normal((64, 2))
        twice = fwht_inplace(fwht_inplace(np.ascontiguousarray(a.copy())))
        np.testing.assert_allclose(twice, a, atol=1e-13)


class TestSketchConstruction:
    """Seeded sketch construction."""

    def test_deterministic(self):
        a = sketch_new(1000, 128, seed=9)
        b = sketch_new(1000, 128, seed=9)
        np.testing.assert_array_equal(a.rademacher_signs, b.rademacher_signs)
        np.testing.assert_array_equal(a.sample_indices, b.sample_indices)

    def test_seed_changes_sketch(self):
        a = sketch_new(1000, 128, seed=9)
        b = sketch_new(1000, 128, seed=10)
        assert not np.array_equal(a.sample_indices, b.sample_indices)

    def test_structure(self):
        sk = sketch_new(1000, 100, seed=0)
        assert sk.p_pad == 1024
        assert set(np.unique(sk.rademacher_signs)) <= {-1, 1}
        assert np.unique(sk.sample_indices).size == 100
        assert np.all((sk.sample_indices >= 0) & (sk.sample_indices < 1024))
        assert sk.scale == pytest.approx(np.sqrt(1024 / 100))

    def test_sketch_larger_than_padding(self):
        with pytest.raises(InvalidDimensions):
            sketch_new(1000, 1025, seed=0)
        assert sketch_new(1000, 1024, seed=0).s == 1024

    def test_invalid_parameters(self):
        with pytest.raises(InvalidDimensions):
            sketch_new(0, 1, seed=0)
        with pytest.raises(InvalidDimensions):
            sketch_new(10, 0, seed=0)

    def test_from_metadata(self):
        sk = sketch_new(300, 64, seed=4, transform="dft")
        again = sketch_from_metadata(sk.metadata())
        np.testing.assert_array_equal(again.rademacher_signs, sk.rademacher_signs)
        np.testing.assert_array_equal(again.sample_indices, sk.sample_indices)
        assert again.transform_id == "dft"

    def test_unknown_prng_rejected(self):
        meta = SketchMetadata(p=10, s=4, seed=0, prng_id="mt19937")
        with pytest.raises(FormatError):
            sketch_from_metadata(meta)


class TestSketchApplication:
    """Applying S to vectors and column blocks."""

    @pytest.mark.parametrize("transform", ["wht", "dft"])
    def test_full_sketch_is_isometry(self, transform):
        sk = sketch_new(700, 1024, seed=2, transform=transform)
        v = philox(3).standard_normal(700)
        assert np.linalg.norm(sk.apply(v)) == pytest.approx(np.linalg.norm(v), rel=1e-12)

    def test_output_dims(self):
        v = philox(4).standard_normal(100)
        assert sketch_new(100, 32, seed=0).apply(v).shape == (32,)
        assert sketch_new(100, 32, seed=0, transform="dft").apply(v).shape == (64,)

    def test_vector_matches_column_path(self):
        sk = sketch_new(500, 64, seed=5)
        a = philox(6).standard_normal((500, 4))
        block = sketch_apply_columns(sk, a)
        for j in range(4):
            np.testing.assert_allclose(sketch_apply(sk, a[:, j]), block[:, j], rtol=0, atol=1e-14)

    def test_linear(self):
        sk = sketch_new(300, 50, seed=7)
        rng = philox(8)
        u, v = rng.standard_normal(300), rng.standard_normal(300)
        np.testing.assert_allclose(sk.apply(2.0 * u - v), 2.0 * sk.apply(u) - sk.apply(v), atol=1e-12)

    def test_workspace_reuse(self):
        sk = sketch_new(200, 40, seed=1)
        work = sk.new_workspace(1)
        out = np.zeros(40)
        v = philox(9).standard_normal(200)
        first = sk.apply(v, out=out, work=work).copy()
        second = sk.apply(v, out=out, work=work)
        np.testing.assert_array_equal(first, second)

    def test_norm_preserved_in_expectation(self):
        v = philox(10).standard_normal(1024)
        v /= np.linalg.norm(v)
        sq = [np.linalg.norm(sketch_new(1024, 256, seed=i).apply(v)) ** 2 for i in range(200)]
        assert np.mean(sq) == pytest.approx(1.0, abs=0.05)

    def test_wrong_length(self):
        sk = sketch_new(100, 16, seed=0)
        with pytest.raises(DimensionMismatch):
            sk.apply(np.zeros(99))
        with pytest.raises(DimensionMismatch):
            sk.apply_columns(np.zeros((101, 2)))

    def test_empty_block(self):
        sk = sketch_new(100, 16, seed=0)
        assert sk.apply_columns(np.zeros((100, 0))).shape == (16, 0)

    def test_subspace_embedding(self):
        p, k, s = 2048, 16, 1024
        u = random_orthonormal(p, k, seed=11)
        su = sketch_new(p, s, seed=12).apply_columns(u)
        ys = philox(13).standard_normal((500, k))
        ratios = np.linalg.norm(ys @ su.T, axis=1) / np.linalg.norm(ys @ u.T, axis=1)
        assert np.mean(np.abs(ratios - 1.0) < 0.35) >= 0.95
