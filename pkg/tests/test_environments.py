import numpy as np
import pytest

from embedding_mbo.components.dataset import save_dataset
from embedding_mbo.components.environments import ChainEnv
from embedding_mbo.components.environments import ScriptedPolicy
from embedding_mbo.components.environments import chain_env
from embedding_mbo.components.environments import generate_dataset
from embedding_mbo.components.environments import make_env
from embedding_mbo.components.environments import reference_scores
from embedding_mbo.components.environments import run_scripted_episode
from embedding_mbo.components.environments import scripted_policy
from embedding_mbo.components.environments import twin_peaks_env
from embedding_mbo.core.errors import ConfigError
from embedding_mbo.core.errors import DomainError
from embedding_mbo.core.errors import EmptyInputError
from embedding_mbo.core.errors import EnvironmentFault
from embedding_mbo.core.errors import UnregisteredEnvError


class FlakyChain(ChainEnv):
    """A chain that breaks during its second episode."""

    def __init__(self):
        super().__init__(n_states=2, horizon=5)
        self.resets = 0

    def reset(self, seed=None):
        self.resets += 1
        return super().reset(seed)

    def step(self, action):
        if self.resets == 2:
            raise EnvironmentFault("sensor offline")
        return super().step(action)


def _scripted_return(name, **env_kwargs):
    env = twin_peaks_env(**env_kwargs)
    traj = run_scripted_episode(env, scripted_policy("twin_peaks", name), np.random.default_rng(0), seed=0)
    return traj.episode_return


def test_idle_action_keeps_position():
    env = twin_peaks_env()
    start = env.reset(0)
    state, reward, terminal = env.step(np.zeros(2))
    assert np.array_equal(state, start)
    assert reward == pytest.approx(-2.0)
    assert not terminal


def test_twin_peaks_ends_at_horizon():
    env = twin_peaks_env(horizon=60)
    env.reset(0)
    flags = [env.step(np.zeros(2))[2] for _ in range(60)]
    assert flags == [False] * 59 + [True]
    with pytest.raises(EnvironmentFault):
        env.step(np.zeros(2))


@pytest.mark.parametrize("action", [np.array([np.nan, 0.0]), np.zeros(3)])
def test_twin_peaks_rejects_bad_actions(action):
    env = twin_peaks_env()
    env.reset(0)
    with pytest.raises(EnvironmentFault):
        env.step(action)


def test_velocity_is_clipped():
    env = twin_peaks_env()
    env.reset(0)
    state, _, _ = env.step(np.array([5.0, -5.0]))
    assert np.allclose(state, [-0.9, -0.1])


def test_start_noise_depends_on_seed():
    env = twin_peaks_env(start_noise=0.1)
    assert np.array_equal(env.reset(3), env.reset(3))
    assert not np.array_equal(env.reset(3), env.reset(4))


def test_goal_seeking_return():
    """Twenty steps of 0.1 close the distance of 2, so the return is -(1.9 + 1.8 + ... + 0)."""
    assert _scripted_return("goal_seeking") == pytest.approx(-19.0, abs=1e-9)


def test_single_skills_fall_short_of_stitching():
    goal_seeking = _scripted_return("goal_seeking")
    skill_a = _scripted_return("skill_a")
    skill_b = _scripted_return("skill_b")
    assert goal_seeking > skill_a > skill_b


def test_reward_rises_on_approach():
    env = twin_peaks_env()
    traj = run_scripted_episode(env, scripted_policy("twin_peaks", "goal_seeking"), np.random.default_rng(0), seed=0)
    approach = traj.rewards[:20]
    assert np.all(traj.rewards <= 0.0)
    assert np.all(np.diff(approach) > 0)


def test_chain_dynamics():
    env = chain_env(3, rewards=[0.0, 0.0, 1.0])
    assert np.array_equal(env.reset(), [1.0, 0.0, 0.0])
    state, reward, terminal = env.step(np.array([-1.0]))
    assert np.array_equal(state, [1.0, 0.0, 0.0])
    assert (reward, terminal) == (0.0, False)
    env.step(np.array([1.0]))
    state, _, _ = env.step(np.array([0.0]))
    assert np.array_equal(state, [0.0, 0.0, 1.0])
    state, reward, _ = env.step(np.array([1.0]))
    assert np.array_equal(state, [0.0, 0.0, 1.0])
    assert reward == 1.0


def test_chain_step_before_reset():
    with pytest.raises(EnvironmentFault):
        chain_env().step(np.array([1.0]))


def test_chain_validates_rewards():
    with pytest.raises(DomainError):
        ChainEnv(n_states=3, rewards=[1.0, 2.0])
    with pytest.raises(DomainError):
        ChainEnv(n_states=1)


def test_two_state_loop_q_is_geometric_series():
    q = chain_env(2).q_values(gamma=0.5)
    assert np.allclose(q, 2.0, atol=1e-10)


def test_zero_discount_q_is_reward():
    env = chain_env(3, rewards=[0.5, 1.0, 2.0])
    assert np.allclose(env.q_values(gamma=0.0), np.array([[0.5, 0.5], [1.0, 1.0], [2.0, 2.0]]))


def test_three_state_chain_q():
    env = chain_env(3, rewards=[0.0, 0.0, 1.0])
    q = env.q_values(gamma=0.9)
    assert np.allclose(q[:, 1], [8.1, 9.0, 10.0], atol=1e-9)
    assert np.allclose(q[:, 0], [7.29, 8.1, 10.0], atol=1e-9)
    assert env.bellman_residual(0.9, q) < 1e-12


def test_q_values_rejects_bad_gamma():
    with pytest.raises(DomainError):
        chain_env().q_values(gamma=1.0)


def test_make_env():
    assert isinstance(make_env("chain", n_states=4), ChainEnv)
    assert make_env("twin_peaks").max_steps == 60
    with pytest.raises(ConfigError):
        make_env("ant_maze")


def test_scripted_policy_lookup():
    assert scripted_policy("chain", "advance")(np.zeros(3), np.random.default_rng(0))[0] == 1.0
    with pytest.raises(ConfigError):
        scripted_policy("twin_peaks", "advance")


def test_scripted_actions_are_bounded(rng):
    noisy = ScriptedPolicy(name="loud", controller=lambda state, rng: np.zeros(2), noise_std=5.0)
    actions = np.array([noisy(np.zeros(2), rng) for _ in range(100)])
    assert np.all(np.abs(actions) <= 1.0)


def test_generate_one_episode():
    dataset = generate_dataset(twin_peaks_env(), [(scripted_policy("twin_peaks", "skill_a"), 1)], seed=0)
    assert len(dataset) == 1
    traj = dataset.trajectories[0]
    assert len(traj) == 60
    assert traj.terminals[-1] and not traj.terminals[:-1].any()
    assert traj.policy == "skill_a"
    assert dataset.env_name == "twin_peaks"


def test_generated_files_are_identical(tmp_path):
    policies = [(scripted_policy("twin_peaks", "skill_a", 0.1), 2), (scripted_policy("twin_peaks", "uniform_random"), 2)]
    for name in ("first.jsonl", "second.jsonl"):
        save_dataset(generate_dataset(twin_peaks_env(), policies, seed=5), tmp_path / name)
    assert (tmp_path / "first.jsonl").read_bytes() == (tmp_path / "second.jsonl").read_bytes()


def test_mixed_policies_give_two_modes():
    policies = [(scripted_policy("twin_peaks", "goal_seeking"), 3), (scripted_policy("twin_peaks", "skill_b"), 3)]
    returns = generate_dataset(twin_peaks_env(), policies, seed=0).returns()
    assert np.allclose(returns[:3], _scripted_return("goal_seeking"))
    assert np.allclose(returns[3:], _scripted_return("skill_b"))
    assert returns[:3].min() - returns[3:].max() > 10.0


def test_generate_needs_policies():
    with pytest.raises(EmptyInputError):
        generate_dataset(twin_peaks_env(), [])


def test_generation_fault_keeps_partial_data():
    with pytest.raises(EnvironmentFault) as error:
        generate_dataset(FlakyChain(), [(scripted_policy("chain", "advance"), 3)], seed=0)
    partial = error.value.partial
    assert len(partial) == 1
    assert len(partial.trajectories[0]) == 5


def test_reference_scores():
    random, expert = reference_scores("twin_peaks")
    assert expert == pytest.approx(-19.0, abs=1e-9)
    assert random < expert


def test_unregistered_env():
    with pytest.raises(UnregisteredEnvError):
        reference_scores("chain")
