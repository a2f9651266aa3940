import numpy as np
import pytest

from embedding_mbo.components.approximator import Network
from embedding_mbo.components.behavior import ContextualPolicy
from embedding_mbo.components.behavior import TaskEmbedding
from embedding_mbo.components.environments import generate_dataset
from embedding_mbo.components.environments import scripted_policy
from embedding_mbo.components.environments import twin_peaks_env
from embedding_mbo.components.inference import DropModels
from embedding_mbo.components.score import ConservativeScoreModel
from embedding_mbo.core.interfaces import BaseEnv
from embedding_mbo.core.interfaces import BaseObjective
from embedding_mbo.core.models import MlpSpec
from embedding_mbo.core.models import OfflineDataset
from embedding_mbo.core.models import Trajectory


def make_trajectory(episode_return: float, length: int = 3, state_dim: int = 2, action_dim: int = 1, terminal=True):
    """A trajectory of `length` steps whose rewards sum to `episode_return`."""
    rewards = np.full(length, episode_return / length)
    terminals = np.zeros(length, dtype=bool)
    terminals[-1] = terminal
    return Trajectory(
        observations=np.arange(length * state_dim, dtype=float).reshape(length, state_dim) / 10,
        actions=np.linspace(-0.5, 0.5, length * action_dim).reshape(length, action_dim),
        rewards=rewards,
        terminals=terminals,
    )


def make_dataset(returns, **kwargs) -> OfflineDataset:
    trajectories = [make_trajectory(value, **kwargs) for value in returns]
    return OfflineDataset(
        trajectories=trajectories,
        state_dim=trajectories[0].state_dim,
        action_dim=trajectories[0].action_dim,
    )


def _linear(input_dim: int, output_dim: int, weight: np.ndarray, bias=None, activation="identity") -> Network:
    spec = MlpSpec(input_dim=input_dim, hidden_dims=(), output_dim=output_dim, output_activation=activation)
    bias = np.zeros(output_dim) if bias is None else np.asarray(bias, dtype=float)
    return Network.zeros(spec).with_params(np.concatenate([np.asarray(weight, dtype=float).reshape(-1), bias]))


def planted_models(
    candidates,
    score_coef,
    state_dim: int = 1,
    log_std: float = np.log(0.1),
) -> DropModels:
    """Hand-set models with no hidden layers.

    The embedding of sub-task n is exactly `candidates[n]`, the policy mean is
    z itself (so action_dim equals dim(z)) and f(s, a, z) = score_coef . z.
    """
    candidates = np.atleast_2d(np.asarray(candidates, dtype=float))
    n_subtasks, dim = candidates.shape
    embedding = TaskEmbedding(
        n_subtasks=n_subtasks,
        network=_linear(n_subtasks, dim, np.arctanh(candidates).T, activation="tanh"),
    )
    policy_head = np.zeros((2 * dim, dim + 1))
    policy_head[:dim, :dim] = np.eye(dim)
    policy = ContextualPolicy(
        encoder=_linear(state_dim, 1, np.zeros((1, state_dim))),
        head=_linear(dim + 1, 2 * dim, policy_head, np.r_[np.zeros(dim), np.full(dim, log_std)]),
        action_dim=dim,
    )
    score_encoder = _linear(state_dim + dim, 1, np.zeros((1, state_dim + dim)))
    score_head = _linear(dim + 1, 1, np.r_[np.asarray(score_coef, dtype=float).reshape(-1), 0.0][None, :])
    score = ConservativeScoreModel(
        encoder=score_encoder,
        head=score_head,
        target_encoder=score_encoder.params.copy(),
        target_head=score_head.params.copy(),
        action_dim=dim,
    )
    return DropModels(embedding=embedding, policy=policy, score=score)


class OneStepEnv(BaseEnv):
    """A single step rewarded by -(a - target)^2."""

    name = "one_step"
    state_dim = 1
    action_dim = 1
    max_steps = 1

    def __init__(self, target: float = 0.5):
        self.target = target
        self._done = True

    def reset(self, seed=None):
        self._done = False
        return np.zeros(1)

    def step(self, action):
        self._done = True
        return np.zeros(1), -float((np.asarray(action).reshape(-1)[0] - self.target) ** 2), True


class QuadraticObjective(BaseObjective):
    """f(z) = -||z - peak||^2, the same at every state."""

    def __init__(self, peak):
        self.peak = np.asarray(peak, dtype=float)

    def value_and_grad(self, state, z):
        z = np.atleast_2d(z)
        return -np.sum((z - self.peak) ** 2, axis=1), -2.0 * (z - self.peak)


class SideObjective(BaseObjective):
    """Prefers positive z[0] right of x = 0 and negative z[0] left of it."""

    def value_and_grad(self, state, z):
        z = np.atleast_2d(z)
        sign = 1.0 if state[0] >= 0 else -1.0
        grads = np.zeros_like(z)
        grads[:, 0] = sign
        return sign * z[:, 0], grads


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def ranked_dataset():
    return make_dataset([3.0, 9.0, 1.0, 9.0, 5.0, 7.0])


@pytest.fixture
def twin_peaks_dataset():
    env = twin_peaks_env()
    policies = [
        (scripted_policy("twin_peaks", "skill_a", 0.1), 3),
        (scripted_policy("twin_peaks", "skill_b", 0.1), 3),
    ]
    return generate_dataset(env, policies, seed=0)


@pytest.fixture
def one_step_env():
    return OneStepEnv()
