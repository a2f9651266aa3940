"""Small fully connected networks with hand-written reverse-mode gradients.

Every network is a chain of affine layers with ReLU between them and an
optional elementwise tanh on the output. Gradients are accumulated layer by
layer from a cache recorded on the forward pass; there is no general tape.
The module also holds the loss primitives the rest of the package composes
(squared error, the diagonal-Gaussian log-density and the softmax
log-likelihood), Adam and the soft target blend.
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np

from embedding_mbo.core.errors import DomainError
from embedding_mbo.core.errors import NumericalError
from embedding_mbo.core.errors import ParseError
from embedding_mbo.core.errors import ShapeError
from embedding_mbo.core.models import AdamState
from embedding_mbo.core.models import ArrayModel
from embedding_mbo.core.models import MlpSpec

PARAMS_FORMAT_VERSION = 1
_OUTPUT_ACTIVATIONS = ("identity", "tanh")

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class LossValue:
    """A scalar loss and its partial derivatives.

    `d_outputs` is the gradient with respect to the network outputs and
    `d_params` any direct gradient with respect to the parameters; either may
    be None when the loss does not depend on it.
    """

    value: float
    d_outputs: np.ndarray | None = None
    d_params: np.ndarray | None = None


LossClosure = Callable[[np.ndarray | None, np.ndarray], LossValue]


def init_params(spec: MlpSpec, seed: int) -> np.ndarray:
    """Uniform fan-in initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in)); zero biases."""
    rng = np.random.default_rng(seed)
    blocks = []
    for fan_in, fan_out in spec.layer_dims:
        bound = 1.0 / np.sqrt(fan_in)
        blocks.append(rng.uniform(-bound, bound, size=fan_out * fan_in))
        blocks.append(np.zeros(fan_out))
    return np.concatenate(blocks)


def unpack(spec: MlpSpec, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat parameter vector into per-layer (W, b) views."""
    if params.ndim != 1 or len(params) != spec.n_params:
        raise ShapeError(f"expected {spec.n_params} parameters, got {params.shape}")
    layers = []
    offset = 0
    for fan_in, fan_out in spec.layer_dims:
        weight = params[offset : offset + fan_out * fan_in].reshape(fan_out, fan_in)
        offset += fan_out * fan_in
        bias = params[offset : offset + fan_out]
        offset += fan_out
        layers.append((weight, bias))
    return layers


def _as_batch(spec: MlpSpec, inputs: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(inputs, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeError(f"expected input width {spec.input_dim}, got shape {np.shape(inputs)}")
    return x, single


def forward_cached(spec: MlpSpec, params: np.ndarray, inputs: np.ndarray) -> tuple[np.ndarray, dict]:
    """Forward pass that also returns what `backward` needs."""
    x, single = _as_batch(spec, inputs)
    layers = unpack(spec, params)
    activations = [x]
    pre_activations = []
    hidden = x
    last = len(layers) - 1
    for index, (weight, bias) in enumerate(layers):
        pre = hidden @ weight.T + bias
        if not np.all(np.isfinite(pre)):
            raise NumericalError("non-finite activation", layer=index)
        pre_activations.append(pre)
        if index < last:
            hidden = np.maximum(pre, 0.0)
        elif spec.output_activation == "tanh":
            hidden = np.tanh(pre)
        else:
            hidden = pre
        activations.append(hidden)
    output = hidden[0] if single else hidden
    return output, {"activations": activations, "pre": pre_activations, "single": single}


def forward(spec: MlpSpec, params: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """Evaluate the network on one input vector or a batch of rows."""
    return forward_cached(spec, params, inputs)[0]


def backward(
    spec: MlpSpec, params: np.ndarray, cache: dict, d_output: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Pull an output gradient back through the cached forward pass.

    Returns:
        tuple: (gradient w.r.t. the flat parameters, gradient w.r.t. the inputs)
    """
    layers = unpack(spec, params)
    activations, pre_activations = cache["activations"], cache["pre"]
    grad = np.asarray(d_output, dtype=np.float64)
    if cache["single"]:
        grad = grad[None, :]
    if grad.shape != activations[-1].shape:
        raise ShapeError(f"output gradient shape {grad.shape} != {activations[-1].shape}")

    last = len(layers) - 1
    blocks: list[np.ndarray] = []
    for index in range(last, -1, -1):
        weight, _ = layers[index]
        if index == last:
            if spec.output_activation == "tanh":
                grad = grad * (1.0 - activations[-1] ** 2)
        else:
            grad = grad * (pre_activations[index] > 0.0)
        d_weight = grad.T @ activations[index]
        d_bias = grad.sum(axis=0)
        if not (np.all(np.isfinite(d_weight)) and np.all(np.isfinite(d_bias))):
            raise NumericalError("non-finite gradient", layer=index)
        blocks.append(d_bias)
        blocks.append(d_weight.reshape(-1))
        grad = grad @ weight

    d_params = np.concatenate(blocks[::-1])
    d_inputs = grad[0] if cache["single"] else grad
    return d_params, d_inputs


def grad_params(
    spec: MlpSpec,
    params: np.ndarray,
    loss_closure: LossClosure,
    inputs: np.ndarray | None = None,
) -> np.ndarray:
    """d(loss)/d(params) for a loss built from the network outputs and/or params.

    Args:
        spec: Network shape.
        params: Flat parameters.
        loss_closure: Called as `loss_closure(outputs, params)`; `outputs` is
            None when no inputs are given.
        inputs: Optional network inputs.

    Returns:
        np.ndarray: Gradient with the same length as `params`.
    """
    outputs, cache = (None, None) if inputs is None else forward_cached(spec, params, inputs)
    loss = loss_closure(outputs, params)
    if not np.isfinite(loss.value):
        raise NumericalError("non-finite loss")
    grads = np.zeros_like(params)
    if loss.d_outputs is not None and cache is not None:
        grads += backward(spec, params, cache, loss.d_outputs)[0]
    if loss.d_params is not None:
        grads += loss.d_params
    return grads


def grad_input(spec: MlpSpec, params: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """Jacobian d(output)/d(input) at one input; a vector when the output is scalar."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError("grad_input takes a single input vector")
    tiled = np.tile(x, (spec.output_dim, 1))
    _, cache = forward_cached(spec, params, tiled)
    _, jacobian = backward(spec, params, cache, np.eye(spec.output_dim))
    return jacobian[0] if spec.output_dim == 1 else jacobian


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update."""
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ShapeError(
            f"params {params.shape}, grads {grads.shape} and moments {state.m.shape} differ"
        )
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads**2
    m_hat = m / (1.0 - state.beta1**step)
    v_hat = v / (1.0 - state.beta2**step)
    updated = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return updated, state.model_copy(update={"m": m, "v": v, "step": step})


def soft_blend(target: np.ndarray, online: np.ndarray, tau: float) -> np.ndarray:
    """(1 - tau) * target + tau * online."""
    if not 0.0 <= tau <= 1.0:
        raise DomainError(f"blend rate must lie in [0, 1], got {tau}")
    if target.shape != online.shape:
        raise ShapeError(f"cannot blend {target.shape} with {online.shape}")
    return (1.0 - tau) * target + tau * online


def squared_error(predictions: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over rows of the summed squared error, and its gradient."""
    diff = np.asarray(predictions) - np.asarray(targets)
    rows = diff.shape[0] if diff.ndim > 0 else 1
    value = float(np.sum(diff**2) / rows)
    return value, 2.0 * diff / rows


def gaussian_log_prob(
    mean: np.ndarray, log_std: np.ndarray, x: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Diagonal-Gaussian log-density per row, with its gradients.

    Returns:
        tuple: (log-densities, d/d mean, d/d log_std), each per row.
    """
    std = np.exp(log_std)
    scaled = (x - mean) / std
    log_prob = -0.5 * np.sum(scaled**2 + 2.0 * log_std + LOG_2PI, axis=-1)
    d_mean = scaled / std
    d_log_std = scaled**2 - 1.0
    return log_prob, d_mean, d_log_std


def softmax_log_likelihood(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean log-likelihood of integer labels under row-wise softmax, and its gradient."""
    logits = np.atleast_2d(logits)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(len(labels))
    value = float(np.mean(log_probs[rows, labels]))
    grad = -np.exp(log_probs)
    grad[rows, labels] += 1.0
    return value, grad / len(labels)


def dump_params(spec: MlpSpec, params: np.ndarray) -> bytes:
    """Serialize parameters: version byte, dims header, little-endian float64 values."""
    if len(params) != spec.n_params:
        raise ShapeError(f"expected {spec.n_params} parameters, got {len(params)}")
    dims = [spec.input_dim, *spec.hidden_dims, spec.output_dim]
    header = np.array([len(dims), *dims], dtype="<u4").tobytes()
    activation = _OUTPUT_ACTIVATIONS.index(spec.output_activation)
    return (
        bytes([PARAMS_FORMAT_VERSION, activation])
        + header
        + np.asarray(params, dtype="<f8").tobytes()
    )


def load_params(data: bytes) -> tuple[MlpSpec, np.ndarray, int]:
    """Inverse of `dump_params`.

    Returns:
        tuple: (spec, params, number of bytes consumed)
    """
    if len(data) < 6:
        raise ParseError("parameter block too short")
    if data[0] != PARAMS_FORMAT_VERSION:
        raise ParseError(f"unsupported parameter format version {data[0]}")
    if data[1] >= len(_OUTPUT_ACTIVATIONS):
        raise ParseError(f"unknown output activation code {data[1]}")
    (count,) = np.frombuffer(data, dtype="<u4", count=1, offset=2)
    offset = 6 + 4 * int(count)
    if count < 2 or len(data) < offset:
        raise ParseError("truncated parameter header")
    dims = np.frombuffer(data, dtype="<u4", count=int(count), offset=6).astype(int).tolist()
    spec = MlpSpec(
        input_dim=dims[0],
        hidden_dims=tuple(dims[1:-1]),
        output_dim=dims[-1],
        output_activation=_OUTPUT_ACTIVATIONS[data[1]],
    )
    end = offset + 8 * spec.n_params
    if len(data) < end:
        raise ParseError("truncated parameter block")
    params = np.frombuffer(data, dtype="<f8", count=spec.n_params, offset=offset).astype(np.float64)
    return spec, params, end


class Network(ArrayModel):
    """A network's shape, parameters and Adam state, replaced wholesale on update."""

    spec: MlpSpec
    params: np.ndarray
    optim: AdamState

    @classmethod
    def create(cls, spec: MlpSpec, seed: int, lr: float = 1e-3) -> "Network":
        return cls(spec=spec, params=init_params(spec, seed), optim=AdamState.zeros(spec.n_params, lr))

    @classmethod
    def zeros(cls, spec: MlpSpec, lr: float = 1e-3) -> "Network":
        return cls(spec=spec, params=np.zeros(spec.n_params), optim=AdamState.zeros(spec.n_params, lr))

    def __call__(self, inputs: np.ndarray) -> np.ndarray:
        return forward(self.spec, self.params, inputs)

    def forward_cached(self, inputs: np.ndarray) -> tuple[np.ndarray, dict]:
        return forward_cached(self.spec, self.params, inputs)

    def backward(self, cache: dict, d_output: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return backward(self.spec, self.params, cache, d_output)

    def apply_gradient(self, grads: np.ndarray) -> "Network":
        params, optim = adam_step(self.params, grads, self.optim)
        return self.model_copy(update={"params": params, "optim": optim})

    def with_params(self, params: np.ndarray) -> "Network":
        return self.model_copy(update={"params": np.asarray(params, dtype=np.float64)})

    def with_lr(self, lr: float) -> "Network":
        return self.model_copy(update={"optim": self.optim.model_copy(update={"lr": lr})})
