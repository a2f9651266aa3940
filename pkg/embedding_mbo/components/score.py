"""Conservative score model f(s, a, z).

f is regressed onto the value of the z-indexed behavior policy with a SARSA
target taken from the data, and a Lagrange multiplier keeps the expected score
of embeddings drawn uniformly from the embedding box no more than `eta` above
the score of in-distribution embeddings.
"""

from typing import Any

import numpy as np
from pydantic import BaseModel
from pydantic import Field

from embedding_mbo.components.approximator import Network
from embedding_mbo.components.approximator import forward
from embedding_mbo.components.approximator import soft_blend
from embedding_mbo.components.behavior import ContextualPolicy
from embedding_mbo.core.errors import DataError
from embedding_mbo.core.errors import NumericalError
from embedding_mbo.core.errors import ShapeError
from embedding_mbo.core.interfaces import BaseEmbedding
from embedding_mbo.core.models import ArrayModel
from embedding_mbo.core.models import MlpSpec
from embedding_mbo.core.models import TransitionBatch
from embedding_mbo.core.settings import logger

SCORE_VERSION = 1


class ConservativeScoreModel(ArrayModel):
    """f = head([z, encoder([s, a])]) with a soft-updated target copy."""

    encoder: Network
    head: Network
    target_encoder: np.ndarray
    target_head: np.ndarray
    action_dim: int = Field(..., ge=1)
    gamma: float = Field(0.99, ge=0, lt=1)
    tau: float = Field(5e-3, ge=0, le=1)
    eta: float = 2.0
    lam: float = Field(1.0, ge=0, description="Lagrange multiplier")
    lambda_lr: float = Field(1e-3, ge=0)
    n_ood: int = Field(10, ge=1)
    conservative: bool = True
    sample_actions: bool = False

    @classmethod
    def create(
        cls,
        state_dim: int,
        action_dim: int,
        z_dim: int = 5,
        hidden_dim: int = 64,
        feature_dim: int = 64,
        seed: int = 0,
        lr: float = 1e-3,
        **settings: Any,
    ) -> "ConservativeScoreModel":
        encoder = Network.create(
            MlpSpec(input_dim=state_dim + action_dim, hidden_dims=(hidden_dim, hidden_dim), output_dim=feature_dim),
            seed,
            lr,
        )
        head = Network.create(
            MlpSpec(
                input_dim=z_dim + feature_dim,
                hidden_dims=(hidden_dim, hidden_dim, hidden_dim),
                output_dim=1,
            ),
            seed + 1,
            lr,
        )
        return cls(
            encoder=encoder,
            head=head,
            target_encoder=encoder.params.copy(),
            target_head=head.params.copy(),
            action_dim=action_dim,
            **settings,
        )

    @property
    def z_dim(self) -> int:
        return self.head.spec.input_dim - self.encoder.spec.output_dim

    @property
    def state_dim(self) -> int:
        return self.encoder.spec.input_dim - self.action_dim

    def values_cached(self, states: np.ndarray, actions: np.ndarray, z: np.ndarray) -> tuple[np.ndarray, Any]:
        features, encoder_cache = self.encoder.forward_cached(np.concatenate([states, actions], axis=1))
        out, head_cache = self.head.forward_cached(np.concatenate([z, features], axis=1))
        return out[:, 0], (encoder_cache, head_cache)

    def target_values(self, states: np.ndarray, actions: np.ndarray, z: np.ndarray) -> np.ndarray:
        features = forward(self.encoder.spec, self.target_encoder, np.concatenate([states, actions], axis=1))
        return forward(self.head.spec, self.target_head, np.concatenate([z, features], axis=1))[:, 0]

    def backward(self, cache: Any, d_values: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Gradients for (encoder params, head params, action rows, z rows)."""
        encoder_cache, head_cache = cache
        d_head, d_inputs = self.head.backward(head_cache, d_values[:, None])
        d_z, d_features = d_inputs[:, : self.z_dim], d_inputs[:, self.z_dim :]
        d_encoder, d_sa = self.encoder.backward(encoder_cache, d_features)
        return d_encoder, d_head, d_sa[:, self.state_dim :], d_z


class ScoreTerms(ArrayModel):
    """A loss value with its gradients for the score nets and the embedding source."""

    value: float
    d_encoder: np.ndarray
    d_head: np.ndarray
    d_embedding: np.ndarray


class ScoreLosses(BaseModel):
    td: float
    gap: float
    lam: float


def score(m: ConservativeScoreModel, s: np.ndarray, a: np.ndarray, z: np.ndarray) -> float | np.ndarray:
    """f(s, a, z); a float for single vectors, an array for stacked rows."""
    single = np.ndim(s) == 1
    states, actions, embeddings = (np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in (s, a, z))
    if not len(states) == len(actions) == len(embeddings):
        raise ShapeError("states, actions and embeddings must have the same number of rows")
    if states.shape[1] != m.state_dim or actions.shape[1] != m.action_dim or embeddings.shape[1] != m.z_dim:
        raise ShapeError(
            f"expected widths ({m.state_dim}, {m.action_dim}, {m.z_dim}),"
            f" got ({states.shape[1]}, {actions.shape[1]}, {embeddings.shape[1]})"
        )
    values, _ = m.values_cached(states, actions, embeddings)
    return float(values[0]) if single else values


def td_loss(m: ConservativeScoreModel, embedding: BaseEmbedding, batch: TransitionBatch, n: int | None) -> ScoreTerms:
    """Mean squared TD error against r + gamma * (1 - terminal) * f_target(s', a', z).

    The target side carries no gradient; the same z is used on both sides.
    """
    missing = ~batch.terminals & ~batch.next_valid
    if np.any(missing):
        raise DataError(f"{int(missing.sum())} non-terminal transitions lack a next action")

    z, z_cache = embedding.encode(batch.states, batch.actions, n)
    predictions, cache = m.values_cached(batch.states, batch.actions, z)
    bootstrap = m.target_values(batch.next_states, batch.next_actions, z)
    targets = batch.rewards + m.gamma * (1.0 - batch.terminals) * bootstrap

    errors = predictions - targets
    value = float(np.mean(errors**2))
    d_encoder, d_head, _, d_z = m.backward(cache, 2.0 * errors / len(batch))
    return ScoreTerms(value=value, d_encoder=d_encoder, d_head=d_head, d_embedding=embedding.backward(z_cache, d_z))


def _policy_actions(
    m: ConservativeScoreModel, policy: ContextualPolicy, states: np.ndarray, z: np.ndarray, rng: np.random.Generator
) -> tuple[np.ndarray, Any]:
    mean, log_std, cache = policy.distribution_cached(states, z)
    if m.sample_actions:
        mean = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
    return mean, cache


def conservative_gap(
    m: ConservativeScoreModel,
    embedding: BaseEmbedding,
    policy: ContextualPolicy,
    batch: TransitionBatch,
    n: int | None,
    rng: np.random.Generator | int | None = None,
) -> ScoreTerms:
    """E_s[ E_{z ~ U(box)} f(s, beta(s, z), z) ] - E_s[ f(s, beta(s, z_n), z_n) ].

    Out-of-distribution embeddings are constants. `d_embedding` is the
    gradient for the in-distribution embeddings, including the path through
    the policy's action; `train_step` does not apply it.
    """
    if len(batch) == 0:
        raise ShapeError("conservative_gap needs a nonempty batch")
    generator = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    rows = len(batch)

    ood_states = np.repeat(batch.states, m.n_ood, axis=0)
    ood_z = generator.uniform(-embedding.support, embedding.support, size=(rows * m.n_ood, embedding.dim))
    ood_actions, _ = _policy_actions(m, policy, ood_states, ood_z, generator)
    ood_values, ood_cache = m.values_cached(ood_states, ood_actions, ood_z)

    z, z_cache = embedding.encode(batch.states, batch.actions, n)
    in_actions, policy_cache = _policy_actions(m, policy, batch.states, z, generator)
    in_values, in_cache = m.values_cached(batch.states, in_actions, z)

    value = float(np.mean(ood_values) - np.mean(in_values))
    ood_encoder, ood_head, _, _ = m.backward(ood_cache, np.full(len(ood_values), 1.0 / len(ood_values)))
    in_encoder, in_head, d_actions, d_z = m.backward(in_cache, np.full(rows, -1.0 / rows))
    _, _, d_z_policy = policy.backward(policy_cache, d_actions)
    return ScoreTerms(
        value=value,
        d_encoder=ood_encoder + in_encoder,
        d_head=ood_head + in_head,
        d_embedding=embedding.backward(z_cache, d_z + d_z_policy),
    )


def train_step(
    m: ConservativeScoreModel,
    embedding: BaseEmbedding,
    policy: ContextualPolicy,
    batch: TransitionBatch,
    n: int | None,
    rng: np.random.Generator | int | None = None,
) -> tuple[ConservativeScoreModel, BaseEmbedding, ScoreLosses]:
    """One primal-dual step.

    The primal step descends td + lam * gap over the score nets with lam held
    fixed, while the embedding source only follows the TD gradient. The dual
    step moves lam by lambda_lr * (gap - eta) and projects it onto [0, inf),
    then the target nets are blended towards the new online nets.

    Raises:
        NumericalError: If a loss is non-finite; nothing is updated.
    """
    td = td_loss(m, embedding, batch, n)
    gap = conservative_gap(m, embedding, policy, batch, n, rng)
    if not (np.isfinite(td.value) and np.isfinite(gap.value)):
        logger.error(f"Non-finite score losses: td={td.value}, gap={gap.value}")
        raise NumericalError("non-finite score-model loss")

    weight = m.lam if m.conservative else 0.0
    encoder = m.encoder.apply_gradient(td.d_encoder + weight * gap.d_encoder)
    head = m.head.apply_gradient(td.d_head + weight * gap.d_head)
    # no gap gradient into the embeddings
    embedding = embedding.apply_gradient(td.d_embedding)

    lam = max(0.0, m.lam + m.lambda_lr * (gap.value - m.eta)) if m.conservative else 0.0
    updated = m.model_copy(
        update={
            "encoder": encoder,
            "head": head,
            "target_encoder": soft_blend(m.target_encoder, encoder.params, m.tau),
            "target_head": soft_blend(m.target_head, head.params, m.tau),
            "lam": lam,
        }
    )
    return updated, embedding, ScoreLosses(td=td.value, gap=gap.value, lam=lam)


def set_conservatism(m: ConservativeScoreModel, enabled: bool) -> ConservativeScoreModel:
    """Switch the gap constraint on or off; when off, lam is pinned at 0."""
    if enabled:
        return m.model_copy(update={"conservative": True})
    return m.model_copy(update={"conservative": False, "lam": 0.0})
