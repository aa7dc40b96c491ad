from __future__ import annotations

import logging
from enum import Enum
from typing import Any, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.sparse.linalg import LinearOperator
from scipy.special import log_softmax, softmax

from sketchlu.core.exceptions import DimensionMismatch
from sketchlu.core.linalg import frozen

logger = logging.getLogger("sketchlu.models.mlp")


class Activation(str, Enum):
    tanh = "tanh"
    relu = "relu"


# ids used by the MLPC checkpoint header
ACTIVATION_IDS = {Activation.tanh: 0, Activation.relu: 1}


class LossKind(str, Enum):
    """Training loss; fixes the output Hessian H(x) of the GGN."""

    mse = "mse"
    cross_entropy = "cross_entropy"


def n_params_for(layer_dims: Tuple[int, ...]) -> int:
    return int(sum((layer_dims[i] + 1) * layer_dims[i + 1] for i in range(len(layer_dims) - 1)))


class MlpModel(BaseModel):
    """
    Fully connected network f_θ: R^d -> R^t.

    Parameter layout in `params`, layer by layer: the weight matrix
    (out × in) flattened column-major, then the bias (out). Hidden layers
    apply the activation; the last layer is affine.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    layer_dims: Tuple[int, ...] = Field(..., description="[d, h1, ..., t]")
    activation: Activation = Activation.tanh
    params: np.ndarray

    @field_validator("params", mode="before")
    @classmethod
    def _to_vector(cls, v: Any) -> np.ndarray:
        arr = np.array(v, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(arr)):
            raise ValueError("model parameters must be finite")
        return frozen(arr)

    @model_validator(mode="after")
    def _check(self) -> "MlpModel":
        if len(self.layer_dims) < 2 or min(self.layer_dims) < 1:
            raise ValueError(f"invalid layer dims {self.layer_dims}")
        expected = n_params_for(self.layer_dims)
        if self.params.size != expected:
            raise ValueError(f"expected {expected} parameters, got {self.params.size}")
        return self

    @property
    def n_params(self) -> int:
        return int(self.params.size)

    @property
    def input_dim(self) -> int:
        return int(self.layer_dims[0])

    @property
    def output_dim(self) -> int:
        return int(self.layer_dims[-1])

    def layers(self, params: Optional[np.ndarray] = None) -> List[Tuple[np.ndarray, np.ndarray]]:
        """(W, b) views into `params` (defaults to the model's own)."""
        return unpack_layers(self.layer_dims, self.params if params is None else params)

    def with_params(self, params: np.ndarray) -> "MlpModel":
        return MlpModel(layer_dims=self.layer_dims, activation=self.activation, params=params)


def unpack_layers(
    layer_dims: Tuple[int, ...], params: np.ndarray
) -> List[Tuple[np.ndarray, np.ndarray]]:
    out: List[Tuple[np.ndarray, np.ndarray]] = []
    offset = 0
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        w = params[offset : offset + fan_in * fan_out].reshape((fan_out, fan_in), order="F")
        offset += fan_in * fan_out
        b = params[offset : offset + fan_out]
        offset += fan_out
        out.append((w, b))
    return out


def init_mlp(
    layer_dims: Tuple[int, ...] | List[int],
    activation: Activation | str = Activation.tanh,
    seed: int = 0,
) -> MlpModel:
    """LeCun-normal weights (variance 1/fan_in), zero biases, from Philox(seed)."""
    dims = tuple(int(d) for d in layer_dims)
    rng = np.random.Generator(np.random.Philox(seed))
    chunks = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        chunks.append(rng.standard_normal(fan_in * fan_out) / np.sqrt(fan_in))
        chunks.append(np.zeros(fan_out))
    return MlpModel(layer_dims=dims, activation=Activation(activation), params=np.concatenate(chunks))


# -------------------------------
# Activations
# -------------------------------


def _act(z: np.ndarray, kind: Activation) -> np.ndarray:
    return np.tanh(z) if kind is Activation.tanh else np.maximum(z, 0.0)


def _act_grad(z: np.ndarray, h: np.ndarray, kind: Activation) -> np.ndarray:
    if kind is Activation.tanh:
        return 1.0 - h * h
    # subgradient 0 at the kink
    return (z > 0.0).astype(np.float64)


# -------------------------------
# Batched forward / tangent / adjoint passes
# -------------------------------


class _ForwardCache:
    """Layer inputs and activation derivatives of one batch."""

    __slots__ = ("inputs", "derivs", "output")

    def __init__(self, inputs: List[np.ndarray], derivs: List[np.ndarray], output: np.ndarray):
        self.inputs = inputs
        self.derivs = derivs
        self.output = output


def _check_batch(m: MlpModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != m.input_dim:
        raise DimensionMismatch(f"model expects inputs of dim {m.input_dim}, got shape {x.shape}")
    return x


def forward_cache(m: MlpModel, x: np.ndarray) -> _ForwardCache:
    x = _check_batch(m, x)
    layers = m.layers()
    inputs: List[np.ndarray] = []
    derivs: List[np.ndarray] = []
    h = x
    for i, (w, b) in enumerate(layers):
        inputs.append(h)
        z = h @ w.T + b
        if i == len(layers) - 1:
            h = z
        else:
            h = _act(z, m.activation)
            derivs.append(_act_grad(z, h, m.activation))
    return _ForwardCache(inputs, derivs, h)


def forward_batch(m: MlpModel, x: np.ndarray) -> np.ndarray:
    """Rows of x are samples; returns n × t outputs."""
    return forward_cache(m, x).output


def jvp_cached(m: MlpModel, cache: _ForwardCache, v: np.ndarray) -> np.ndarray:
    """Per-sample J(x_i) v for every row of the cached batch (n × t)."""
    layers = m.layers()
    tangents = m.layers(v)
    dh = dz = np.zeros_like(cache.inputs[0])
    for i, ((w, _), (dw, db)) in enumerate(zip(layers, tangents)):
        h = cache.inputs[i]
        dz = h @ dw.T + db
        if i > 0:
            dz += dh @ w.T
        if i < len(layers) - 1:
            dh = cache.derivs[i] * dz
    return dz


def vjp_cached(m: MlpModel, cache: _ForwardCache, u: np.ndarray) -> np.ndarray:
    """Σ_i J(x_i)ᵀ u_i over the cached batch (u is n × t); returns length p."""
    layers = m.layers()
    grad = np.zeros(m.n_params)
    grads = m.layers(grad)
    g = np.asarray(u, dtype=np.float64)
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        gw, gb = grads[i]
        gw[...] = g.T @ cache.inputs[i]
        gb[...] = g.sum(axis=0)
        if i > 0:
            g = (g @ w) * cache.derivs[i - 1]
    return grad


def jvp_batch(m: MlpModel, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    v = _check_param_vector(m, v)
    return jvp_cached(m, forward_cache(m, x), v)


def vjp_batch(m: MlpModel, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    cache = forward_cache(m, x)
    u = np.asarray(u, dtype=np.float64)
    if u.shape != cache.output.shape:
        raise DimensionMismatch(f"cotangent shape {u.shape} != output shape {cache.output.shape}")
    return vjp_cached(m, cache, u)


def per_sample_jacobians(m: MlpModel, x: np.ndarray) -> np.ndarray:
    """J(x_i) for every row of x, as an n × t × p array."""
    cache = forward_cache(m, x)
    n, t = cache.output.shape
    layers = m.layers()
    jac = np.zeros((n, t, m.n_params))
    for o in range(t):
        g = np.zeros((n, t))
        g[:, o] = 1.0
        offset = 0
        blocks = []
        for i in range(len(layers) - 1, -1, -1):
            w, _ = layers[i]
            h = cache.inputs[i]
            # column-major flattening of the per-sample outer product g_i h_iᵀ
            gw = (h[:, :, None] * g[:, None, :]).reshape(n, -1)
            blocks.append((i, gw, g.copy()))
            if i > 0:
                g = (g @ w) * cache.derivs[i - 1]
        for i, gw, gb in sorted(blocks, key=lambda item: item[0]):
            jac[:, o, offset : offset + gw.shape[1]] = gw
            offset += gw.shape[1]
            jac[:, o, offset : offset + gb.shape[1]] = gb
            offset += gb.shape[1]
    return jac


# -------------------------------
# Single-point contracts
# -------------------------------


def _check_input(m: MlpModel, x: Any) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != m.input_dim:
        raise DimensionMismatch(f"expected input of length {m.input_dim}, got shape {x.shape}")
    return x.reshape(1, -1)


def _check_param_vector(m: MlpModel, v: Any) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.shape[0] != m.n_params:
        raise DimensionMismatch(f"expected parameter vector of length {m.n_params}, got {v.shape[0]}")
    return v


def forward(m: MlpModel, x: Any) -> np.ndarray:
    return forward_batch(m, _check_input(m, x))[0]


def jvp(m: MlpModel, x: Any, v: Any) -> np.ndarray:
    """J_θ(x) v by forward-mode tangent propagation."""
    return jvp_batch(m, _check_input(m, x), _check_param_vector(m, v))[0]


def vjp(m: MlpModel, x: Any, u: Any) -> np.ndarray:
    """J_θ(x)ᵀ u by reverse accumulation."""
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    if u.shape[0] != m.output_dim:
        raise DimensionMismatch(f"expected output cotangent of length {m.output_dim}, got {u.shape[0]}")
    return vjp_batch(m, _check_input(m, x), u.reshape(1, -1))


def jacobian_transpose(m: MlpModel, x: Any) -> np.ndarray:
    """Jᵀ (p × t) assembled from t vjp calls with canonical basis vectors."""
    xb = _check_input(m, x)
    cache = forward_cache(m, xb)
    t = m.output_dim
    cols = []
    for o in range(t):
        e = np.zeros((1, t))
        e[0, o] = 1.0
        cols.append(vjp_cached(m, cache, e))
    return np.asfortranarray(np.column_stack(cols))


# -------------------------------
# Loss curvature
# -------------------------------


def loss_output_hessian(loss: LossKind, f_out: Any) -> np.ndarray:
    """
    ∇²_f ℓ(y | f), independent of y for both supported losses.

    - mse (ℓ = ½‖y − f‖²): I_t
    - cross_entropy on logits: diag(π) − ππᵀ with π = softmax(f)
    """
    f_out = np.asarray(f_out, dtype=np.float64).reshape(-1)
    if LossKind(loss) is LossKind.mse:
        return np.eye(f_out.size)
    pi = softmax(f_out)
    return np.diag(pi) - np.outer(pi, pi)


def apply_output_hessian(loss: LossKind, probs: Optional[np.ndarray], a: np.ndarray) -> np.ndarray:
    """Row-wise H(x_i) a_i; `probs` are the softmax outputs for cross-entropy."""
    if LossKind(loss) is LossKind.mse:
        return a
    pa = probs * a
    return pa - probs * pa.sum(axis=1, keepdims=True)


def loss_and_output_grad(loss: LossKind, f_out: np.ndarray, targets: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean batch loss and its gradient w.r.t. the outputs (n × t)."""
    n = f_out.shape[0]
    if LossKind(loss) is LossKind.mse:
        y = np.asarray(targets, dtype=np.float64).reshape(f_out.shape)
        diff = f_out - y
        return float(0.5 * np.sum(diff * diff) / n), diff / n
    labels = np.asarray(targets).astype(np.int64).reshape(-1)
    logp = log_softmax(f_out, axis=1)
    value = float(-np.mean(logp[np.arange(n), labels]))
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return value, grad / n


# -------------------------------
# GGN operator
# -------------------------------


class GgnOperator(LinearOperator):
    """
    Matrix-free Generalized Gauss-Newton G = Σ_i J(x_i)ᵀ H(x_i) J(x_i).

    The data is processed in fixed-order batches of `batch_size`; each batch
    contributes vjp(H · jvp(v)) and the partial sums are accumulated in that
    order, so matvecs are deterministic.
    """

    def __init__(
        self,
        model: MlpModel,
        inputs: np.ndarray,
        loss: LossKind,
        batch_size: int = 256,
    ) -> None:
        self.model = model
        self.inputs = np.ascontiguousarray(_check_batch(model, inputs))
        self.loss = LossKind(loss)
        self.batch_size = max(1, int(batch_size))
        self._batches = [
            self.inputs[start : start + self.batch_size]
            for start in range(0, self.inputs.shape[0], self.batch_size)
        ]
        self._probs: List[Optional[np.ndarray]] = []
        for xb in self._batches:
            if self.loss is LossKind.cross_entropy:
                self._probs.append(softmax(forward_batch(model, xb), axis=1))
            else:
                self._probs.append(None)
        p = model.n_params
        super().__init__(dtype=np.dtype(np.float64), shape=(p, p))

    def _matvec(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        out = np.zeros(self.shape[0])
        for xb, probs in zip(self._batches, self._probs):
            cache = forward_cache(self.model, xb)
            jv = jvp_cached(self.model, cache, v)
            out += vjp_cached(self.model, cache, apply_output_hessian(self.loss, probs, jv))
        return out

    def _rmatvec(self, v: np.ndarray) -> np.ndarray:
        return self._matvec(v)

    def _adjoint(self) -> "GgnOperator":
        return self

    @property
    def n_points(self) -> int:
        return int(self.inputs.shape[0])


def ggn_matvec(g: GgnOperator, v: Any) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.shape[0] != g.shape[0]:
        raise DimensionMismatch(f"GGN has p={g.shape[0]}, got vector of length {v.shape[0]}")
    return g.matvec(v)
