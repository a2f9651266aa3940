"""Test-time embedding selection.

The trained score model is treated as a differentiable objective over z at
the current state. The four selection rules differ in whether they search
from the raw sub-task embeddings or after gradient ascent, and whether the
choice is made once per episode or re-made along the way.
"""

from typing import Callable

import numpy as np

from embedding_mbo.components.approximator import Network
from embedding_mbo.components.approximator import squared_error
from embedding_mbo.components.behavior import ContextualPolicy
from embedding_mbo.components.behavior import CvaeEncoder
from embedding_mbo.components.behavior import TaskEmbedding
from embedding_mbo.components.behavior import act
from embedding_mbo.components.score import ConservativeScoreModel
from embedding_mbo.core.errors import DomainError
from embedding_mbo.core.errors import EmptyInputError
from embedding_mbo.core.errors import EnvironmentFault
from embedding_mbo.core.errors import NumericalError
from embedding_mbo.core.interfaces import BaseEnv
from embedding_mbo.core.interfaces import BaseObjective
from embedding_mbo.core.models import ArrayModel
from embedding_mbo.core.models import EpisodeRecord
from embedding_mbo.core.models import InferenceConfig
from embedding_mbo.core.models import InferenceResult
from embedding_mbo.core.models import MlpSpec
from embedding_mbo.core.models import OfflineDataset
from embedding_mbo.core.settings import logger

ADAPTIVE_RULES = ("best_ada", "grad_ada")

RowObjective = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


class DropModels(ArrayModel):
    """Everything inference needs from one checkpoint."""

    embedding: TaskEmbedding | CvaeEncoder
    policy: ContextualPolicy
    score: ConservativeScoreModel

    @property
    def support(self) -> float:
        return self.embedding.support


class ModelObjective(BaseObjective):
    """z -> f(s, beta_mean(s, z), z), differentiated through the policy mean."""

    def __init__(self, models: DropModels):
        self.models = models

    def value_and_grad_rows(self, states: np.ndarray, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Row-paired version: row i scores z[i] at states[i]."""
        policy, score = self.models.policy, self.models.score
        actions, _, policy_cache = policy.distribution_cached(states, z)
        values, score_cache = score.values_cached(states, actions, z)
        _, _, d_actions, d_z = score.backward(score_cache, np.ones(len(values)))
        _, _, d_z_policy = policy.backward(policy_cache, d_actions)
        return values, d_z + d_z_policy

    def value_and_grad(self, state: np.ndarray, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        z = np.atleast_2d(z)
        states = np.repeat(np.atleast_2d(state), len(z), axis=0)
        return self.value_and_grad_rows(states, z)


def _ascend(
    objective: RowObjective, z0: np.ndarray, K: int, alpha: float, support: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Projected ascent on every row of z0 at once.

    `objective` is called with the indices of the rows still moving and their
    current points.

    A row whose gradient turns non-finite keeps its last finite point and
    stops; the other rows carry on.

    Returns:
        tuple: (final points, steps taken per row, finite flag per row)
    """
    z = np.array(z0, dtype=np.float64)
    steps = np.zeros(len(z), dtype=int)
    finite = np.ones(len(z), dtype=bool)
    for _ in range(K):
        active = np.flatnonzero(finite)
        if len(active) == 0:
            break
        try:
            _, grads = objective(active, z[active])
        except NumericalError:
            logger.warning("Embedding ascent hit a numerical fault; keeping the last finite points")
            finite[active] = False
            break
        ok = np.all(np.isfinite(grads), axis=1)
        finite[active[~ok]] = False
        moving = active[ok]
        z[moving] = np.clip(z[moving] + alpha * grads[ok], -support, support)
        steps[moving] += 1
    if not finite.all():
        logger.warning(f"Embedding ascent stopped early on {int((~finite).sum())} of {len(z)} starts")
    return z, steps, finite


def _check_support(z: np.ndarray, support: float) -> None:
    if np.any(np.abs(z) > support + 1e-12):
        raise DomainError(f"starting embedding lies outside the support box [-{support}, {support}]")


def grad_ascent_z(
    objective: BaseObjective | DropModels,
    s: np.ndarray,
    z0: np.ndarray,
    K: int,
    alpha: float,
    support: float | None = None,
) -> tuple[np.ndarray, int, bool]:
    """K steps of z <- clip(z + alpha * grad_z f(s, beta_mean(s, z), z)).

    Args:
        objective: The score landscape, or the models to build it from.
        s: Current state.
        z0: Starting embedding, one vector or a stack of rows.
        K: Number of ascent steps.
        alpha: Step size.
        support: Half-width of the box z is clipped to; taken from the
            embedding when models are passed.

    Returns:
        tuple: (z_K, steps taken, whether every gradient was finite). For a
        stack of starts the step count is the minimum over rows.
    """
    if K < 0 or alpha <= 0:
        raise DomainError(f"ascent needs K >= 0 and alpha > 0, got K={K}, alpha={alpha}")
    if isinstance(objective, DropModels):
        support = objective.support if support is None else support
        objective = ModelObjective(objective)
    support = 1.0 if support is None else support

    single = np.ndim(z0) == 1
    starts = np.atleast_2d(np.asarray(z0, dtype=np.float64))
    _check_support(starts, support)

    final, steps, finite = _ascend(lambda _, rows: objective.value_and_grad(s, rows), starts, K, alpha, support)
    result = final[0] if single else final
    return result, int(steps.min()), bool(finite.all())


def _finite_argmax(scores: np.ndarray) -> int:
    """Index of the highest finite score, lowest index on ties."""
    masked = np.where(np.isfinite(scores), scores, -np.inf)
    if not np.isfinite(masked).any():
        raise NumericalError("no candidate embedding has a finite score")
    return int(np.argmax(masked))


def select_embedding(
    cfg: InferenceConfig,
    models: BaseObjective | DropModels,
    s: np.ndarray,
    candidates: np.ndarray,
    support: float | None = None,
    previous: InferenceResult | None = None,
) -> InferenceResult:
    """Pick z* at state s under one of the four rules.

    `previous` is the last z* of the episode; with `cfg.warm_start` the
    adaptive ascent also starts from it.

    Raises:
        EmptyInputError: If there are no candidates.
    """
    candidates = np.atleast_2d(np.asarray(candidates, dtype=np.float64))
    if candidates.size == 0:
        raise EmptyInputError("select_embedding needs at least one candidate embedding")
    if isinstance(models, DropModels):
        support = models.support if support is None else support
        objective: BaseObjective = ModelObjective(models)
    else:
        objective = models
    support = 1.0 if support is None else support

    raw_scores = objective.value(s, candidates)
    best = _finite_argmax(raw_scores)

    if cfg.rule in ("best", "best_ada"):
        return InferenceResult(
            z_star=candidates[best].copy(), score=float(raw_scores[best]), origin_subtask=best, steps_taken=0
        )

    if cfg.rule == "grad":
        starts, origins = candidates[best : best + 1], [best]
    else:
        starts, origins = candidates, list(range(len(candidates)))
        if cfg.warm_start and previous is not None:
            starts = np.vstack([starts, previous.z_star[None, :]])
            origins.append(previous.origin_subtask)

    starts = np.clip(starts, -support, support)
    final, steps, finite = _ascend(
        lambda _, rows: objective.value_and_grad(s, rows), starts, cfg.K, cfg.alpha, support
    )
    scores = objective.value(s, final)
    chosen = _finite_argmax(scores)
    return InferenceResult(
        z_star=final[chosen].copy(),
        score=float(scores[chosen]),
        origin_subtask=origins[chosen],
        steps_taken=int(steps[chosen]),
        finite=bool(finite[chosen]),
    )


def rollout(
    env: BaseEnv,
    models: DropModels,
    cfg: InferenceConfig,
    seed: int = 0,
    max_steps: int | None = None,
    objective: BaseObjective | None = None,
) -> EpisodeRecord:
    """Run one episode, choosing z* with `select_embedding`.

    `best` and `grad` choose once at the initial state; the adaptive rules
    re-choose every `cfg.interval` steps and hold z* in between. An
    environment fault ends the episode early with status "truncated".
    """
    horizon = env.max_steps if max_steps is None else max_steps
    objective = objective or ModelObjective(models)
    candidates = models.embedding.candidates()
    adaptive = cfg.rule in ADAPTIVE_RULES
    rng = np.random.default_rng(seed)

    states, actions, rewards, z_stars, origins = [], [], [], [], []
    calls = 0
    status = "ok"
    result: InferenceResult | None = None
    state = env.reset(seed)
    for t in range(horizon):
        if result is None or (adaptive and t % cfg.interval == 0):
            result = select_embedding(cfg, objective, state, candidates, models.support, result)
            calls += 1
        action = act(models.policy, state, result.z_star, cfg.action_mode, rng)
        try:
            next_state, reward, terminal = env.step(action)
        except EnvironmentFault as e:
            logger.warning(f"Episode truncated at step {t}: {e}")
            status = "truncated"
            break
        states.append(state)
        actions.append(action)
        rewards.append(reward)
        z_stars.append(result.z_star)
        origins.append(result.origin_subtask)
        state = next_state
        if terminal:
            break

    return EpisodeRecord(
        states=np.array(states).reshape(len(states), env.state_dim),
        actions=np.array(actions).reshape(len(actions), env.action_dim),
        rewards=np.array(rewards, dtype=np.float64),
        z_stars=np.array(z_stars).reshape(len(z_stars), models.embedding.dim),
        origins=tuple(origins),
        inference_calls=calls,
        status=status,
    )


class DistilledPolicy(ArrayModel):
    """A plain state -> action network."""

    network: Network

    def __call__(self, states: np.ndarray) -> np.ndarray:
        return self.network(states)


def rollout_policy(
    env: BaseEnv, policy: Callable[[np.ndarray], np.ndarray], seed: int = 0, max_steps: int | None = None
) -> EpisodeRecord:
    """Run one episode with a non-contextual policy; z* is empty."""
    horizon = env.max_steps if max_steps is None else max_steps
    states, actions, rewards = [], [], []
    status = "ok"
    state = env.reset(seed)
    for t in range(horizon):
        action = np.asarray(policy(state), dtype=np.float64).reshape(env.action_dim)
        try:
            next_state, reward, terminal = env.step(action)
        except EnvironmentFault as e:
            logger.warning(f"Episode truncated at step {t}: {e}")
            status = "truncated"
            break
        states.append(state)
        actions.append(action)
        rewards.append(reward)
        state = next_state
        if terminal:
            break
    return EpisodeRecord(
        states=np.array(states).reshape(len(states), env.state_dim),
        actions=np.array(actions).reshape(len(actions), env.action_dim),
        rewards=np.array(rewards, dtype=np.float64),
        z_stars=np.zeros((len(states), 0)),
        status=status,
    )


def infer_rows(models: DropModels, states: np.ndarray, cfg: InferenceConfig) -> np.ndarray:
    """grad_ada z* for many states at once, one row per state."""
    candidates = models.embedding.candidates()
    n_states, n_starts = len(states), len(candidates)
    tiled_states = np.repeat(states, n_starts, axis=0)
    starts = np.tile(candidates, (n_states, 1))
    objective = ModelObjective(models)

    final, _, _ = _ascend(
        lambda active, rows: objective.value_and_grad_rows(tiled_states[active], rows),
        starts,
        cfg.K,
        cfg.alpha,
        models.support,
    )
    actions = models.policy.mean_action(tiled_states, final)
    scores, _ = models.score.values_cached(tiled_states, actions, final)
    scores = np.where(np.isfinite(scores), scores, -np.inf).reshape(n_states, n_starts)
    chosen = np.argmax(scores, axis=1)
    return final.reshape(n_states, n_starts, -1)[np.arange(n_states), chosen]


def distill_policy(
    models: DropModels,
    dataset: OfflineDataset,
    cfg: InferenceConfig,
    steps: int = 2000,
    lr: float = 1e-3,
    batch_size: int = 256,
    hidden_dim: int = 64,
    seed: int = 0,
) -> tuple[DistilledPolicy, float]:
    """Regress a fresh state -> action network onto beta_mean(s, z*(s)).

    z*(s) is found with the grad_ada search for every state in the dataset.

    Returns:
        tuple: (the distilled policy, its final mean squared error on all targets)
    """
    if len(dataset) == 0:
        raise EmptyInputError("cannot distill from an empty dataset")
    states = dataset.stacked().states
    if len(states) == 0:
        raise EmptyInputError("the dataset holds no transitions")
    z_star = infer_rows(models, states, cfg.model_copy(update={"rule": "grad_ada"}))
    targets = models.policy.mean_action(states, z_star)
    logger.info(f"Distilling {len(states)} state-action targets")

    spec = MlpSpec(
        input_dim=dataset.state_dim, hidden_dims=(hidden_dim, hidden_dim), output_dim=dataset.action_dim
    )
    network = Network.create(spec, seed, lr)
    rng = np.random.default_rng(seed)
    for _ in range(steps):
        rows = rng.integers(len(states), size=min(batch_size, len(states)))
        predictions, cache = network.forward_cached(states[rows])
        _, d_predictions = squared_error(predictions, targets[rows])
        grads, _ = network.backward(cache, d_predictions)
        network = network.apply_gradient(grads)

    final_error, _ = squared_error(network(states), targets)
    logger.info(f"Distilled policy mean squared error: {final_error:.5f}")
    return DistilledPolicy(network=network), final_error
