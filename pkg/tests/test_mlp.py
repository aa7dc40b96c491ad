from __future__ import annotations

import numpy as np
import pytest

from sketchlu.core.exceptions import DimensionMismatch, EmptyInput, NonFiniteLoss
from sketchlu.models.dataset import Dataset
from sketchlu.models.mlp import (
    GgnOperator,
    LossKind,
    forward,
    forward_batch,
    ggn_matvec,
    init_mlp,
    jacobian_transpose,
    jvp,
    loss_and_output_grad,
    loss_output_hessian,
    n_params_for,
    per_sample_jacobians,
    vjp,
)
from sketchlu.services.training_service import evaluate, train_sgd
from tests.conftest import philox


def explicit_ggn(model, inputs, loss):
    jac = per_sample_jacobians(model, inputs)
    outputs = forward_batch(model, inputs)
    g = np.zeros((model.n_params, model.n_params))
    for i in range(inputs.shape[0]):
        g += jac[i].T @ loss_output_hessian(loss, outputs[i]) @ jac[i]
    return g


class TestMlpModel:
    """Parameter layout and initialization."""

    def test_param_count(self, tiny_model):
        assert n_params_for((2, 4, 3)) == 27
        assert tiny_model.n_params == 27
        assert tiny_model.input_dim == 2
        assert tiny_model.output_dim == 3

    def test_init_deterministic(self):
        a = init_mlp((3, 5, 2), "relu", seed=4)
        b = init_mlp((3, 5, 2), "relu", seed=4)
        np.testing.assert_array_equal(a.params, b.params)

    def test_layer_views(self, tiny_model):
        (w1, b1), (w2, b2) = tiny_model.layers()
        assert w1.shape == (4, 2) and b1.shape == (4,)
        assert w2.shape == (3, 4) and b2.shape == (3,)
        np.testing.assert_array_equal(b1, 0.0)
        x = np.array([0.3, -1.2])
        np.testing.assert_allclose(forward(tiny_model, x), w2 @ np.tanh(w1 @ x + b1) + b2, atol=1e-14)

    def test_wrong_input_dim(self, tiny_model):
        with pytest.raises(DimensionMismatch):
            forward(tiny_model, np.zeros(3))


class TestDerivatives:
    """jvp / vjp against finite differences and each other."""

    @pytest.mark.parametrize("activation", ["tanh", "relu"])
    def test_jvp_finite_difference(self, activation):
        model = init_mlp((2, 4, 3), activation, seed=1)
        rng = philox(2)
        x = rng.standard_normal(2)
        v = rng.standard_normal(model.n_params)
        h = 1e-6
        plus = forward(model.with_params(model.params + h * v), x)
        minus = forward(model.with_params(model.params - h * v), x)
        np.testing.assert_allclose(jvp(model, x, v), (plus - minus) / (2 * h), atol=1e-6)

    def test_adjoint_identity(self, tiny_model):
        rng = philox(3)
        for _ in range(5):
            x = rng.standard_normal(2)
            v = rng.standard_normal(tiny_model.n_params)
            u = rng.standard_normal(3)
            assert float(u @ jvp(tiny_model, x, v)) == pytest.approx(float(v @ vjp(tiny_model, x, u)), abs=1e-10)

    def test_jacobian_transpose_matches_per_sample(self, tiny_model, tiny_inputs):
        jac = per_sample_jacobians(tiny_model, tiny_inputs)
        for i in range(3):
            np.testing.assert_allclose(jacobian_transpose(tiny_model, tiny_inputs[i]), jac[i].T, atol=1e-14)

    def test_cross_entropy_gradient(self):
        rng = philox(4)
        f = rng.standard_normal((5, 3))
        y = np.array([0, 2, 1, 1, 0])
        _, grad = loss_and_output_grad(LossKind.cross_entropy, f, y)
        h = 1e-6
        numeric = np.zeros_like(f)
        for idx in np.ndindex(*f.shape):
            step = np.zeros_like(f)
            step[idx] = h
            hi, _ = loss_and_output_grad(LossKind.cross_entropy, f + step, y)
            lo, _ = loss_and_output_grad(LossKind.cross_entropy, f - step, y)
            numeric[idx] = (hi - lo) / (2 * h)
        np.testing.assert_allclose(grad, numeric, atol=1e-8)

    def test_cross_entropy_hessian_rows_sum_to_zero(self):
        hess = loss_output_hessian(LossKind.cross_entropy, np.array([0.5, -1.0, 2.0]))
        np.testing.assert_allclose(hess.sum(axis=1), 0.0, atol=1e-15)
        np.testing.assert_allclose(hess, hess.T)


class TestGgnOperator:
    """Matrix-free GGN."""

    @pytest.mark.parametrize("loss", [LossKind.mse, LossKind.cross_entropy])
    def test_matches_assembled_matrix(self, tiny_model, tiny_inputs, loss):
        op = GgnOperator(tiny_model, tiny_inputs, loss, batch_size=4)
        dense = np.column_stack([ggn_matvec(op, e) for e in np.eye(tiny_model.n_params)])
        expected = explicit_ggn(tiny_model, tiny_inputs, loss)
        np.testing.assert_allclose(dense, expected, rtol=1e-9, atol=1e-9 * np.max(np.abs(expected)))

    def test_symmetric_psd(self, tiny_model, tiny_inputs):
        op = GgnOperator(tiny_model, tiny_inputs, LossKind.cross_entropy)
        dense = op @ np.eye(tiny_model.n_params)
        np.testing.assert_allclose(dense, dense.T, atol=1e-12)
        assert np.min(np.linalg.eigvalsh((dense + dense.T) / 2)) >= -1e-10

    def test_batch_size_does_not_change_result(self, tiny_model, tiny_inputs):
        v = philox(5).standard_normal(tiny_model.n_params)
        a = GgnOperator(tiny_model, tiny_inputs, LossKind.mse, batch_size=3).matvec(v)
        b = GgnOperator(tiny_model, tiny_inputs, LossKind.mse, batch_size=100).matvec(v)
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)

    def test_deterministic(self, tiny_model, tiny_inputs):
        op = GgnOperator(tiny_model, tiny_inputs, LossKind.cross_entropy, batch_size=3)
        v = philox(6).standard_normal(tiny_model.n_params)
        np.testing.assert_array_equal(op.matvec(v), op.matvec(v))

    def test_vector_length_checked(self, tiny_model, tiny_inputs):
        op = GgnOperator(tiny_model, tiny_inputs, LossKind.mse)
        with pytest.raises(DimensionMismatch):
            ggn_matvec(op, np.zeros(5))


class TestTraining:
    """Mini-batch SGD."""

    def test_learns_two_gaussians(self, gaussian_task):
        train, test, _ = gaussian_task
        model = init_mlp((4, 16, 2), "tanh", seed=0)
        trained = train_sgd(model, train, LossKind.cross_entropy, epochs=20, lr=0.1, batch=32, seed=0)
        _, accuracy = evaluate(trained, test, LossKind.cross_entropy)
        assert accuracy >= 0.9

    def test_zero_epochs_returns_initial_params(self, gaussian_task):
        train, _, _ = gaussian_task
        model = init_mlp((4, 8, 2), "tanh", seed=1)
        trained = train_sgd(model, train, LossKind.cross_entropy, epochs=0, lr=0.1, batch=16, seed=0)
        np.testing.assert_array_equal(trained.params, model.params)

    def test_epoch_callback(self, gaussian_task):
        train, _, _ = gaussian_task
        seen = []
        train_sgd(
            init_mlp((4, 8, 2), "relu", seed=2), train, LossKind.cross_entropy,
            epochs=3, lr=0.05, batch=32, seed=1, on_epoch=lambda *row: seen.append(row),
        )
        assert [row[0] for row in seen] == [0, 1, 2]

    def test_progress_bar_does_not_change_result(self, gaussian_task, capsys):
        train, _, _ = gaussian_task
        model = init_mlp((4, 8, 2), "tanh", seed=4)
        quiet = train_sgd(model, train, LossKind.cross_entropy, epochs=2, lr=0.1, batch=32, seed=3)
        shown = train_sgd(
            model, train, LossKind.cross_entropy, epochs=2, lr=0.1, batch=32, seed=3, show_progress=True
        )
        np.testing.assert_array_equal(shown.params, quiet.params)
        assert "train id_train" in capsys.readouterr().err

    def test_divergence_raises(self, gaussian_task):
        train, _, _ = gaussian_task
        onehot = train.model_copy(update={"targets": np.eye(2)[train.targets]})
        with np.errstate(all="ignore"), pytest.raises(NonFiniteLoss):
            train_sgd(init_mlp((4, 8, 2), "relu", seed=3), onehot, LossKind.mse, epochs=5, lr=1e30, batch=16, seed=0)

    def test_empty_dataset(self):
        empty = Dataset(inputs=np.zeros((0, 4)), targets=np.zeros(0, dtype=np.int64), name="empty")
        with pytest.raises(EmptyInput):
            train_sgd(init_mlp((4, 2), "tanh", seed=0), empty, LossKind.cross_entropy, epochs=1, lr=0.1, batch=4, seed=0)
