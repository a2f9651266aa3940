"""Small environments with known answers, and scripted data-generating policies.

`TwinPeaksEnv` is a 2-D point mass whose fastest route to the goal needs one
skill left of x = 0 and another right of it, so a dataset made of the two
skills rewards stitching. `ChainEnv` is a deterministic chain whose Q-values
are available exactly.
"""

import json
import os
from functools import lru_cache
from typing import Any
from typing import Callable

import numpy as np
from pydantic import BaseModel
from pydantic import ConfigDict
from pydantic import Field

from embedding_mbo.core.errors import ConfigError
from embedding_mbo.core.errors import DomainError
from embedding_mbo.core.errors import EmptyInputError
from embedding_mbo.core.errors import EnvironmentFault
from embedding_mbo.core.errors import UnregisteredEnvError
from embedding_mbo.core.interfaces import BaseEnv
from embedding_mbo.core.models import OfflineDataset
from embedding_mbo.core.models import Trajectory
from embedding_mbo.core.settings import logger

ROOT_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
REFERENCES_PATH = os.path.join(ROOT_DIR, "core/references.json")

TWIN_PEAKS_START = np.array([-1.0, 0.0])
TWIN_PEAKS_GOAL = np.array([1.0, 0.0])


class TwinPeaksEnv(BaseEnv):
    """Point mass on the plane; the action is a velocity in [-1, 1]^2.

    Position moves by `dt * action` and the reward is minus the distance to
    the goal after the move. Episodes end at the horizon.
    """

    name = "twin_peaks"
    state_dim = 2
    action_dim = 2

    def __init__(self, horizon: int = 60, dt: float = 0.1, start_noise: float = 0.0):
        if horizon < 1 or dt <= 0 or start_noise < 0:
            raise DomainError(f"invalid twin_peaks settings: horizon={horizon}, dt={dt}, start_noise={start_noise}")
        self.max_steps = horizon
        self.dt = dt
        self.start_noise = start_noise
        self.goal = TWIN_PEAKS_GOAL.copy()
        self._position = TWIN_PEAKS_START.copy()
        self._t = 0
        self._done = True

    def reset(self, seed: int | None = None) -> np.ndarray:
        rng = np.random.default_rng(seed)
        self._position = TWIN_PEAKS_START + self.start_noise * rng.standard_normal(2)
        self._t = 0
        self._done = False
        return self._position.copy()

    def step(self, action: np.ndarray) -> tuple[np.ndarray, float, bool]:
        if self._done:
            raise EnvironmentFault("twin_peaks: step called on a finished episode")
        velocity = np.asarray(action, dtype=np.float64).reshape(-1)
        if velocity.shape != (2,) or not np.all(np.isfinite(velocity)):
            raise EnvironmentFault(f"twin_peaks: invalid action {action!r}")
        self._position = self._position + self.dt * np.clip(velocity, -1.0, 1.0)
        self._t += 1
        self._done = self._t >= self.max_steps
        reward = -float(np.linalg.norm(self._position - self.goal))
        return self._position.copy(), reward, self._done


class ChainEnv(BaseEnv):
    """States 0..n-1 as one-hot vectors; a >= 0 advances, a < 0 stays.

    The last state loops onto itself. The reward of a step is the reward of
    the state it starts from. The chain never terminates; `max_steps` only
    bounds how long rollouts and generated episodes run.
    """

    name = "chain"
    action_dim = 1

    def __init__(self, n_states: int = 3, rewards: list[float] | None = None, horizon: int | None = None):
        if n_states < 2:
            raise DomainError(f"a chain needs at least 2 states, got {n_states}")
        self.rewards = np.ones(n_states) if rewards is None else np.asarray(rewards, dtype=np.float64)
        if self.rewards.shape != (n_states,) or not np.all(np.isfinite(self.rewards)):
            raise DomainError(f"expected {n_states} finite rewards, got {rewards!r}")
        self.n_states = n_states
        self.state_dim = n_states
        self.max_steps = 20 if horizon is None else horizon
        self._index = 0
        self._started = False

    def one_hot(self, index: int) -> np.ndarray:
        state = np.zeros(self.n_states)
        state[index] = 1.0
        return state

    def successor(self, index: int, advance: bool) -> int:
        return min(index + 1, self.n_states - 1) if advance else index

    def reset(self, seed: int | None = None) -> np.ndarray:
        self._index = 0
        self._started = True
        return self.one_hot(0)

    def step(self, action: np.ndarray) -> tuple[np.ndarray, float, bool]:
        if not self._started:
            raise EnvironmentFault("chain: step called before reset")
        value = float(np.asarray(action, dtype=np.float64).reshape(-1)[0])
        if not np.isfinite(value):
            raise EnvironmentFault(f"chain: invalid action {action!r}")
        reward = float(self.rewards[self._index])
        self._index = self.successor(self._index, value >= 0.0)
        return self.one_hot(self._index), reward, False

    def _backup(self, gamma: float, q: np.ndarray) -> np.ndarray:
        best = q.max(axis=1)
        stay = np.arange(self.n_states)
        advance = np.minimum(stay + 1, self.n_states - 1)
        return self.rewards[:, None] + gamma * np.stack([best[stay], best[advance]], axis=1)

    def q_values(self, gamma: float, tol: float = 1e-12, max_iterations: int = 100_000) -> np.ndarray:
        """Optimal Q by value iteration; column 0 is stay, column 1 is advance."""
        if not 0.0 <= gamma < 1.0:
            raise DomainError(f"gamma must lie in [0, 1), got {gamma}")
        q = np.zeros((self.n_states, 2))
        for _ in range(max_iterations):
            updated = self._backup(gamma, q)
            if np.max(np.abs(updated - q)) < tol:
                return updated
            q = updated
        return q

    def bellman_residual(self, gamma: float, q: np.ndarray) -> float:
        return float(np.max(np.abs(self._backup(gamma, q) - q)))


ENVIRONMENTS: dict[str, Callable[..., BaseEnv]] = {
    "twin_peaks": TwinPeaksEnv,
    "chain": ChainEnv,
}


def make_env(name: str, **kwargs: Any) -> BaseEnv:
    """Build an environment by its registered name."""
    if name not in ENVIRONMENTS:
        raise ConfigError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}")
    return ENVIRONMENTS[name](**kwargs)


def twin_peaks_env(**kwargs: Any) -> TwinPeaksEnv:
    return TwinPeaksEnv(**kwargs)


def chain_env(n_states: int = 3, rewards: list[float] | None = None, horizon: int | None = None) -> ChainEnv:
    return ChainEnv(n_states, rewards, horizon)


Controller = Callable[[np.ndarray, np.random.Generator], np.ndarray]


class ScriptedPolicy(BaseModel):
    """A named controller plus optional Gaussian exploration noise; actions are clipped to [-1, 1]."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    name: str
    controller: Controller
    noise_std: float = Field(0.0, ge=0)

    def __call__(self, state: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        action = np.asarray(self.controller(state, rng), dtype=np.float64)
        if self.noise_std > 0:
            action = action + self.noise_std * rng.standard_normal(action.shape)
        return np.clip(action, -1.0, 1.0)


def _seek_goal(left_speed: float, right_speed: float, dt: float = 0.1) -> Controller:
    def controller(state: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        speed = left_speed if state[0] < 0.0 else right_speed
        return np.clip((TWIN_PEAKS_GOAL - state) / dt, -speed, speed)

    return controller


def _uniform_random(width: int) -> Controller:
    return lambda state, rng: rng.uniform(-1.0, 1.0, size=width)


CONTROLLERS: dict[str, dict[str, Controller]] = {
    "twin_peaks": {
        "skill_a": _seek_goal(1.0, 0.25),
        "skill_b": _seek_goal(0.25, 1.0),
        "goal_seeking": _seek_goal(1.0, 1.0),
        "uniform_random": _uniform_random(2),
    },
    "chain": {
        "advance": lambda state, rng: np.array([1.0]),
        "stay": lambda state, rng: np.array([-1.0]),
    },
}


def scripted_policy(env_name: str, name: str, noise_std: float = 0.0) -> ScriptedPolicy:
    """Look up a registered controller for an environment."""
    controllers = CONTROLLERS.get(env_name, {})
    if name not in controllers:
        raise ConfigError(
            f"no scripted policy {name!r} for environment {env_name!r}; choose from {sorted(controllers)}"
        )
    return ScriptedPolicy(name=name, controller=controllers[name], noise_std=noise_std)


def run_scripted_episode(
    env: BaseEnv, policy: ScriptedPolicy, rng: np.random.Generator, seed: int | None
) -> Trajectory:
    observations, actions, rewards, terminals = [], [], [], []
    state = env.reset(seed)
    for _ in range(env.max_steps):
        action = policy(state, rng)
        try:
            next_state, reward, terminal = env.step(action)
        except EnvironmentFault as e:
            partial = Trajectory(
                observations=observations,
                actions=actions,
                rewards=rewards,
                terminals=terminals,
                policy=policy.name,
            )
            raise EnvironmentFault(str(e), partial=partial) from e
        observations.append(state)
        actions.append(action)
        rewards.append(reward)
        terminals.append(terminal)
        state = next_state
        if terminal:
            break
    return Trajectory(
        observations=observations, actions=actions, rewards=rewards, terminals=terminals, policy=policy.name
    )


def generate_dataset(
    env: BaseEnv, policies: list[tuple[ScriptedPolicy, int]], seed: int = 0
) -> OfflineDataset:
    """Roll out every scripted policy for its number of episodes.

    Raises:
        EmptyInputError: If no policies are given.
        EnvironmentFault: If the environment fails; `partial` holds the
            trajectories finished so far.
    """
    if not policies:
        raise EmptyInputError("generate_dataset needs at least one scripted policy")
    rng = np.random.default_rng(seed)
    trajectories: list[Trajectory] = []
    for policy, n_episodes in policies:
        for _ in range(n_episodes):
            episode_seed = int(rng.integers(2**31))
            try:
                trajectories.append(run_scripted_episode(env, policy, rng, episode_seed))
            except EnvironmentFault as e:
                logger.error(f"Environment fault while generating data with {policy.name}: {e}")
                partial = OfflineDataset(
                    trajectories=trajectories,
                    state_dim=env.state_dim,
                    action_dim=env.action_dim,
                    env_name=env.name,
                )
                raise EnvironmentFault(f"dataset generation aborted: {e}", partial=partial) from e
        logger.info(f"Generated {n_episodes} episodes with scripted policy {policy.name}")
    return OfflineDataset(
        trajectories=trajectories, state_dim=env.state_dim, action_dim=env.action_dim, env_name=env.name
    )


class ReferenceEntry(BaseModel):
    random: str
    expert: str
    episodes: int = Field(10, ge=1)
    seed: int = 0


class ReferenceRegistry(BaseModel):
    version: int
    environments: dict[str, ReferenceEntry]


with open(REFERENCES_PATH) as f:
    REFERENCE_REGISTRY = ReferenceRegistry.model_validate(json.load(f))


@lru_cache(maxsize=None)
def reference_scores(env_name: str) -> tuple[float, float]:
    """Mean (random, expert) episode returns of the registered reference controllers."""
    entry = REFERENCE_REGISTRY.environments.get(env_name)
    if entry is None:
        raise UnregisteredEnvError(
            f"no normalization references for {env_name!r}; register random and expert"
            f" controllers in {REFERENCES_PATH}"
        )
    scores = []
    for name in (entry.random, entry.expert):
        dataset = generate_dataset(make_env(env_name), [(scripted_policy(env_name, name), entry.episodes)], entry.seed)
        scores.append(float(np.mean(dataset.returns())))
    logger.info(f"Normalization references for {env_name}: random={scores[0]:.3f}, expert={scores[1]:.3f}")
    return scores[0], scores[1]
