import numpy as np
import pytest

from embedding_mbo.components.approximator import LossValue
from embedding_mbo.components.approximator import Network
from embedding_mbo.components.approximator import adam_step
from embedding_mbo.components.approximator import dump_params
from embedding_mbo.components.approximator import forward
from embedding_mbo.components.approximator import forward_cached
from embedding_mbo.components.approximator import gaussian_log_prob
from embedding_mbo.components.approximator import grad_input
from embedding_mbo.components.approximator import grad_params
from embedding_mbo.components.approximator import init_params
from embedding_mbo.components.approximator import load_params
from embedding_mbo.components.approximator import soft_blend
from embedding_mbo.components.approximator import softmax_log_likelihood
from embedding_mbo.components.approximator import squared_error
from embedding_mbo.core.errors import DomainError
from embedding_mbo.core.errors import NumericalError
from embedding_mbo.core.errors import ParseError
from embedding_mbo.core.errors import ShapeError
from embedding_mbo.core.models import AdamState
from embedding_mbo.core.models import MlpSpec

HAND_SPEC = MlpSpec(input_dim=2, hidden_dims=(2,), output_dim=1)
HAND_PARAMS = np.array([1.0, -1.0, 2.0, 1.0, 0.0, 0.5, 1.0, -2.0, 0.25])


def _relative_error(a, b):
    return np.linalg.norm(a - b) / max(1e-6, np.linalg.norm(a) + np.linalg.norm(b))


def _smooth_inputs(spec, params, rng, rows=None):
    """Inputs whose hidden pre-activations all sit at least 1e-3 away from the ReLU kink."""
    while True:
        x = rng.normal(size=spec.input_dim if rows is None else (rows, spec.input_dim))
        _, cache = forward_cached(spec, params, x)
        if all(np.min(np.abs(pre)) > 1e-3 for pre in cache["pre"][:-1]):
            return x


def _random_spec(rng):
    depth = int(rng.integers(2, 4))
    output_activation = "tanh" if rng.random() < 0.5 else "identity"
    return MlpSpec(
        input_dim=int(rng.integers(1, 5)),
        hidden_dims=tuple(int(w) for w in rng.integers(2, 7, size=depth)),
        output_dim=int(rng.integers(1, 4)),
        output_activation=output_activation,
    )


def test_parameter_count():
    """Each layer contributes fan_out * fan_in weights plus fan_out biases."""
    spec = MlpSpec(input_dim=3, hidden_dims=(4, 5), output_dim=2)
    assert spec.n_params == (4 * 3 + 4) + (5 * 4 + 5) + (2 * 5 + 2)
    assert len(init_params(spec, seed=0)) == spec.n_params


def test_too_many_hidden_layers():
    with pytest.raises(ValueError):
        MlpSpec(input_dim=1, hidden_dims=(2, 2, 2, 2), output_dim=1)


def test_zero_network_outputs_zero():
    spec = MlpSpec(input_dim=3, hidden_dims=(4, 4), output_dim=2)
    assert np.array_equal(forward(spec, np.zeros(spec.n_params), np.array([1.0, -2.0, 3.0])), np.zeros(2))


def test_identity_layer():
    spec = MlpSpec(input_dim=2, hidden_dims=(), output_dim=2)
    params = np.r_[np.eye(2).reshape(-1), np.zeros(2)]
    assert np.array_equal(forward(spec, params, np.array([1.0, 2.0])), np.array([1.0, 2.0]))


def test_hand_computed_forward():
    """Worked out by hand: hidden relu([2, 1.5]), output 2 - 3 + 0.25."""
    assert forward(HAND_SPEC, HAND_PARAMS, np.array([1.0, -1.0]))[0] == pytest.approx(-0.75)


def test_forward_shape_error():
    with pytest.raises(ShapeError):
        forward(HAND_SPEC, HAND_PARAMS, np.array([1.0, 2.0, 3.0]))
    with pytest.raises(ShapeError):
        forward(HAND_SPEC, HAND_PARAMS[:-1], np.array([1.0, 2.0]))


def test_forward_is_pure(rng):
    spec = _random_spec(rng)
    params = init_params(spec, seed=3)
    x = rng.normal(size=(5, spec.input_dim))
    assert np.array_equal(forward(spec, params, x), forward(spec, params, x))


def test_non_finite_activation_reports_layer():
    params = HAND_PARAMS.copy()
    params[6] = np.inf
    with pytest.raises(NumericalError) as error:
        forward(HAND_SPEC, params, np.array([1.0, -1.0]))
    assert error.value.layer == 1


def test_constant_loss_has_zero_gradient():
    grads = grad_params(HAND_SPEC, HAND_PARAMS, lambda outputs, params: LossValue(3.0))
    assert np.array_equal(grads, np.zeros_like(HAND_PARAMS))


def test_half_squared_norm_gradient_is_params():
    def loss(outputs, params):
        return LossValue(0.5 * float(params @ params), d_params=params.copy())

    assert np.allclose(grad_params(HAND_SPEC, HAND_PARAMS, loss), HAND_PARAMS)


def test_grad_params_matches_finite_differences(rng):
    """Central differences with h=1e-5 on 100 random networks and squared-error losses."""
    h = 1e-5
    for _ in range(100):
        spec = _random_spec(rng)
        params = init_params(spec, seed=int(rng.integers(1 << 30)))
        x = _smooth_inputs(spec, params, rng, rows=3)
        y = rng.normal(size=(3, spec.output_dim))

        def loss(outputs, _):
            value, d_outputs = squared_error(outputs, y)
            return LossValue(value, d_outputs=d_outputs)

        analytic = grad_params(spec, params, loss, x)
        numeric = np.zeros_like(params)
        for i in range(len(params)):
            step = np.zeros_like(params)
            step[i] = h
            numeric[i] = (
                squared_error(forward(spec, params + step, x), y)[0]
                - squared_error(forward(spec, params - step, x), y)[0]
            ) / (2 * h)
        assert _relative_error(analytic, numeric) < 1e-4


def test_grad_input_matches_finite_differences(rng):
    h = 1e-5
    for _ in range(100):
        spec = _random_spec(rng)
        params = init_params(spec, seed=int(rng.integers(1 << 30)))
        x = _smooth_inputs(spec, params, rng)
        jacobian = np.atleast_2d(grad_input(spec, params, x))
        numeric = np.zeros((spec.output_dim, spec.input_dim))
        for j in range(spec.input_dim):
            step = np.zeros_like(x)
            step[j] = h
            numeric[:, j] = (forward(spec, params, x + step) - forward(spec, params, x - step)) / (2 * h)
        assert _relative_error(jacobian, numeric) < 1e-4


def test_linear_jacobian_is_weight():
    weight = np.array([[1.0, 2.0, 3.0], [-1.0, 0.5, 0.0]])
    spec = MlpSpec(input_dim=3, hidden_dims=(), output_dim=2)
    params = np.r_[weight.reshape(-1), np.zeros(2)]
    assert np.allclose(grad_input(spec, params, np.array([0.3, -0.7, 2.0])), weight)


def test_scalar_output_jacobian_is_vector():
    jacobian = grad_input(HAND_SPEC, np.zeros(HAND_SPEC.n_params), np.array([1.0, 1.0]))
    assert jacobian.shape == (2,)
    assert np.array_equal(jacobian, np.zeros(2))


def test_adam_first_step_magnitude_is_lr():
    params, state = adam_step(np.zeros(1), np.ones(1), AdamState.zeros(1, lr=0.1))
    assert params[0] == pytest.approx(-0.1)
    assert state.step == 1


def test_adam_zero_gradient_keeps_params():
    start = np.array([0.5, -1.0])
    params, state = adam_step(start, np.zeros(2), AdamState.zeros(2))
    assert np.array_equal(params, start)
    assert np.array_equal(state.m, np.zeros(2))


def test_adam_moves_against_gradient():
    grads = np.array([1.0, -2.0])
    state = AdamState.zeros(2)
    first, state = adam_step(np.zeros(2), grads, state)
    second, state = adam_step(first, grads, state)
    assert np.all(np.sign(first) == -np.sign(grads))
    assert np.all(np.abs(second) > np.abs(first))
    assert state.step == 2


def test_adam_length_mismatch():
    with pytest.raises(ShapeError):
        adam_step(np.zeros(2), np.zeros(3), AdamState.zeros(2))


def test_soft_blend():
    target, online = np.array([0.0, 2.0]), np.array([2.0, 0.0])
    assert np.array_equal(soft_blend(target, online, 0.5), np.array([1.0, 1.0]))
    assert np.array_equal(soft_blend(target, online, 1.0), online)
    assert np.array_equal(soft_blend(target, online, 0.0), target)
    with pytest.raises(DomainError):
        soft_blend(target, online, 1.5)


def test_soft_blend_is_convex(rng):
    target, online = rng.normal(size=50), rng.normal(size=50)
    blended = soft_blend(target, online, 0.3)
    assert np.all(blended >= np.minimum(target, online) - 1e-12)
    assert np.all(blended <= np.maximum(target, online) + 1e-12)


def test_gaussian_log_prob_standard_normal():
    value, d_mean, d_log_std = gaussian_log_prob(np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 1)))
    assert value[0] == pytest.approx(-0.5 * np.log(2 * np.pi))
    assert d_mean[0, 0] == 0.0
    assert d_log_std[0, 0] == -1.0


def test_softmax_log_likelihood_uniform_logits():
    value, grad = softmax_log_likelihood(np.zeros((2, 4)), np.array([0, 3]))
    assert value == pytest.approx(np.log(0.25))
    assert np.allclose(grad.sum(axis=1), 0.0)


def test_softmax_log_likelihood_gradient(rng):
    logits = rng.normal(size=(3, 4))
    labels = np.array([1, 0, 3])
    _, grad = softmax_log_likelihood(logits, labels)
    step = 1e-6
    for index in np.ndindex(logits.shape):
        bumped = logits.copy()
        bumped[index] += step
        numeric = (softmax_log_likelihood(bumped, labels)[0] - softmax_log_likelihood(logits, labels)[0]) / step
        assert grad[index] == pytest.approx(numeric, abs=1e-5)


def test_params_serialization(rng):
    spec = MlpSpec(input_dim=3, hidden_dims=(4, 2), output_dim=2, output_activation="tanh")
    params = init_params(spec, seed=1)
    data = dump_params(spec, params)
    assert data[0] == 1
    loaded_spec, loaded, consumed = load_params(data + b"trailing")
    assert loaded_spec == spec
    assert np.array_equal(loaded, params)
    assert consumed == len(data)


def test_truncated_params_block():
    data = dump_params(HAND_SPEC, HAND_PARAMS)
    with pytest.raises(ParseError):
        load_params(data[:-8])
    with pytest.raises(ParseError):
        load_params(bytes([9]) + data[1:])


def test_network_update_is_a_new_value():
    network = Network.create(HAND_SPEC, seed=0, lr=0.01)
    updated = network.apply_gradient(np.ones(HAND_SPEC.n_params))
    assert updated.optim.step == 1
    assert network.optim.step == 0
    assert np.all(updated.params < network.params)
