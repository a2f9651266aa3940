"""Task embeddings and the contextual behavior policy.

The embedding maps a sub-task index (one-hot) to z in (-1, 1)^d; the policy
is a diagonal Gaussian over actions whose mean and log-std come from
`head([z, encoder(s)])`. Both are fitted jointly by maximum likelihood on the
decomposed data. The CVAE variant replaces the index embedding with an
encoder q(z | s, a) regularized towards a standard-normal prior.
"""

from typing import Any
from typing import Literal

import numpy as np
from pydantic import BaseModel
from pydantic import Field

from embedding_mbo.components.approximator import Network
from embedding_mbo.components.approximator import gaussian_log_prob
from embedding_mbo.core.errors import NumericalError
from embedding_mbo.core.errors import ShapeError
from embedding_mbo.core.errors import SubTaskIndexError
from embedding_mbo.core.interfaces import BaseEmbedding
from embedding_mbo.core.models import ArrayModel
from embedding_mbo.core.models import MlpSpec
from embedding_mbo.core.models import TransitionBatch

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
CVAE_SUPPORT = 3.0
BEHAVIOR_VERSION = 1


def _clamp_log_std(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Clamped log-std and the mask of entries the clamp let through."""
    return np.clip(raw, LOG_STD_MIN, LOG_STD_MAX), (raw > LOG_STD_MIN) & (raw < LOG_STD_MAX)


class TaskEmbedding(ArrayModel, BaseEmbedding):
    """phi(z | n): one-hot sub-task index to a tanh-bounded embedding."""

    n_subtasks: int = Field(..., ge=1)
    network: Network

    @classmethod
    def create(
        cls, n_subtasks: int, dim: int = 5, hidden_dim: int = 64, seed: int = 0, lr: float = 1e-3
    ) -> "TaskEmbedding":
        spec = MlpSpec(
            input_dim=n_subtasks,
            hidden_dims=(hidden_dim, hidden_dim),
            output_dim=dim,
            output_activation="tanh",
        )
        return cls(n_subtasks=n_subtasks, network=Network.create(spec, seed, lr))

    @property
    def dim(self) -> int:
        return self.network.spec.output_dim

    @property
    def support(self) -> float:
        return 1.0

    def one_hot(self, n: int) -> np.ndarray:
        if not 0 <= n < self.n_subtasks:
            raise SubTaskIndexError(f"sub-task {n} out of range [0, {self.n_subtasks})")
        code = np.zeros(self.n_subtasks)
        code[n] = 1.0
        return code

    def candidates(self) -> np.ndarray:
        return self.network(np.eye(self.n_subtasks))

    def encode(self, states: np.ndarray, actions: np.ndarray, n: int | None) -> tuple[np.ndarray, Any]:
        z, cache = self.network.forward_cached(self.one_hot(n)[None, :])
        return np.repeat(z, len(states), axis=0), cache

    def backward(self, cache: Any, d_z: np.ndarray) -> np.ndarray:
        return self.network.backward(cache, d_z.sum(axis=0, keepdims=True))[0]

    def apply_gradient(self, grads: np.ndarray) -> "TaskEmbedding":
        return self.model_copy(update={"network": self.network.apply_gradient(grads)})


class CvaeEncoder(ArrayModel, BaseEmbedding):
    """phi(z | s, a) for the CVAE variant; the prior p(z) is standard normal.

    `anchors` are per-trajectory mean encodings used as inference starting
    points once training is done.
    """

    network: Network
    anchors: np.ndarray | None = None

    @classmethod
    def create(
        cls,
        state_dim: int,
        action_dim: int,
        dim: int = 5,
        hidden_dim: int = 64,
        seed: int = 0,
        lr: float = 1e-3,
    ) -> "CvaeEncoder":
        spec = MlpSpec(
            input_dim=state_dim + action_dim,
            hidden_dims=(hidden_dim, hidden_dim),
            output_dim=2 * dim,
        )
        return cls(network=Network.create(spec, seed, lr))

    @property
    def dim(self) -> int:
        return self.network.spec.output_dim // 2

    @property
    def support(self) -> float:
        return CVAE_SUPPORT

    def distribution_cached(self, states: np.ndarray, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray, Any]:
        out, cache = self.network.forward_cached(np.concatenate([states, actions], axis=1))
        log_std, passed = _clamp_log_std(out[:, self.dim :])
        return out[:, : self.dim], log_std, (cache, passed)

    def distribution(self, states: np.ndarray, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        mean, log_std, _ = self.distribution_cached(states, actions)
        return mean, log_std

    def candidates(self) -> np.ndarray:
        if self.anchors is None:
            return np.zeros((1, self.dim))
        return self.anchors

    def encode(self, states: np.ndarray, actions: np.ndarray, n: int | None) -> tuple[np.ndarray, Any]:
        mean, _, cache = self.distribution_cached(states, actions)
        return mean, cache

    def backward_distribution(self, cache: Any, d_mean: np.ndarray, d_log_std: np.ndarray) -> np.ndarray:
        net_cache, passed = cache
        return self.network.backward(net_cache, np.concatenate([d_mean, d_log_std * passed], axis=1))[0]

    def backward(self, cache: Any, d_z: np.ndarray) -> np.ndarray:
        return self.backward_distribution(cache, d_z, np.zeros_like(d_z))

    def apply_gradient(self, grads: np.ndarray) -> "CvaeEncoder":
        return self.model_copy(update={"network": self.network.apply_gradient(grads)})

    def with_anchors(self, anchors: np.ndarray) -> "CvaeEncoder":
        return self.model_copy(update={"anchors": np.clip(anchors, -CVAE_SUPPORT, CVAE_SUPPORT)})


class ContextualPolicy(ArrayModel):
    """beta(a | s, z) = N(mean, diag(exp(log_std))^2) with [mean, log_std] = head([z, encoder(s)])."""

    encoder: Network
    head: Network
    action_dim: int = Field(..., ge=1)

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
    ) -> "ContextualPolicy":
        encoder = MlpSpec(input_dim=state_dim, hidden_dims=(hidden_dim, hidden_dim), output_dim=feature_dim)
        head = MlpSpec(
            input_dim=z_dim + feature_dim,
            hidden_dims=(hidden_dim, hidden_dim, hidden_dim),
            output_dim=2 * action_dim,
        )
        return cls(
            encoder=Network.create(encoder, seed, lr),
            head=Network.create(head, seed + 1, lr),
            action_dim=action_dim,
        )

    @property
    def z_dim(self) -> int:
        return self.head.spec.input_dim - self.encoder.spec.output_dim

    def distribution_cached(self, states: np.ndarray, z: np.ndarray) -> tuple[np.ndarray, np.ndarray, Any]:
        states = np.atleast_2d(states)
        z = np.atleast_2d(z)
        if z.shape[1] != self.z_dim:
            raise ShapeError(f"expected embeddings of width {self.z_dim}, got {z.shape}")
        if len(states) == 1 and len(z) > 1:
            states = np.repeat(states, len(z), axis=0)
        elif len(z) == 1 and len(states) > 1:
            z = np.repeat(z, len(states), axis=0)
        elif len(states) != len(z):
            raise ShapeError(f"{len(states)} states cannot pair with {len(z)} embeddings")
        features, encoder_cache = self.encoder.forward_cached(states)
        out, head_cache = self.head.forward_cached(np.concatenate([z, features], axis=1))
        log_std, passed = _clamp_log_std(out[:, self.action_dim :])
        return out[:, : self.action_dim], log_std, (encoder_cache, head_cache, passed)

    def distribution(self, states: np.ndarray, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        mean, log_std, _ = self.distribution_cached(states, z)
        return mean, log_std

    def mean_action(self, states: np.ndarray, z: np.ndarray) -> np.ndarray:
        return self.distribution(states, z)[0]

    def backward(
        self, cache: Any, d_mean: np.ndarray, d_log_std: np.ndarray | None = None
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Gradients for (encoder params, head params, z rows)."""
        encoder_cache, head_cache, passed = cache
        if d_log_std is None:
            d_log_std = np.zeros_like(d_mean)
        d_out = np.concatenate([d_mean, d_log_std * passed], axis=1)
        d_head, d_inputs = self.head.backward(head_cache, d_out)
        d_z, d_features = d_inputs[:, : self.z_dim], d_inputs[:, self.z_dim :]
        d_encoder, _ = self.encoder.backward(encoder_cache, d_features)
        return d_encoder, d_head, d_z

    def apply_gradient(self, d_encoder: np.ndarray, d_head: np.ndarray) -> "ContextualPolicy":
        return self.model_copy(
            update={
                "encoder": self.encoder.apply_gradient(d_encoder),
                "head": self.head.apply_gradient(d_head),
            }
        )


class CvaeLosses(BaseModel):
    recon: float = Field(..., description="Mean log-likelihood of the batch actions")
    kl: float = Field(..., description="Mean KL to the prior")

    @property
    def elbo(self) -> float:
        return self.recon - self.kl


def embed(te: TaskEmbedding, n: int) -> np.ndarray:
    """z for sub-task n."""
    return te.network(te.one_hot(n))


def log_prob(policy: ContextualPolicy, s: np.ndarray, z: np.ndarray, a: np.ndarray) -> np.ndarray | float:
    """Diagonal-Gaussian log-density of `a`; a scalar for a single state."""
    inputs = [np.asarray(x, dtype=np.float64) for x in (s, z, a)]
    if not all(np.all(np.isfinite(x)) for x in inputs):
        raise NumericalError("non-finite input to log_prob")
    s, z, a = inputs
    mean, log_std = policy.distribution(s, z)
    values, _, _ = gaussian_log_prob(mean, log_std, np.atleast_2d(a))
    return float(values[0]) if np.ndim(s) == 1 else values


def act(
    policy: ContextualPolicy,
    s: np.ndarray,
    z: np.ndarray,
    mode: Literal["mean", "sample"] = "mean",
    rng: np.random.Generator | int | None = None,
) -> np.ndarray:
    """Mean action, or a reparameterized sample when `mode` is "sample"."""
    mean, log_std = policy.distribution(s, z)
    if mode == "sample":
        generator = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        mean = mean + np.exp(log_std) * generator.standard_normal(mean.shape)
    return mean[0] if np.ndim(s) == 1 else mean


def gaussian_kl(mean: np.ndarray, log_std: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """KL(N(mean, std^2) || N(0, I)) per row, with gradients w.r.t. mean and log_std."""
    var = np.exp(2.0 * log_std)
    kl = 0.5 * np.sum(mean**2 + var - 1.0 - 2.0 * log_std, axis=-1)
    return kl, mean, var - 1.0


def bc_update(
    te: TaskEmbedding, policy: ContextualPolicy, batch: TransitionBatch, n: int
) -> tuple[TaskEmbedding, ContextualPolicy, float]:
    """One Adam step on -mean log beta(a | s, phi(n)) for policy and embedding."""
    if len(batch) == 0:
        raise ShapeError("bc_update needs a nonempty batch")
    z, z_cache = te.encode(batch.states, batch.actions, n)
    mean, log_std, cache = policy.distribution_cached(batch.states, z)
    values, d_mean, d_log_std = gaussian_log_prob(mean, log_std, batch.actions)
    loss = -float(np.mean(values))
    if not np.isfinite(loss):
        raise NumericalError("non-finite behavior-cloning loss")
    rows = len(batch)
    d_encoder, d_head, d_z = policy.backward(cache, -d_mean / rows, -d_log_std / rows)
    d_embed = te.backward(z_cache, d_z)
    return te.apply_gradient(d_embed), policy.apply_gradient(d_encoder, d_head), loss


def cvae_update(
    encoder: CvaeEncoder, policy: ContextualPolicy, batch: TransitionBatch, rng: np.random.Generator
) -> tuple[CvaeEncoder, ContextualPolicy, CvaeLosses]:
    """One Adam step maximizing E_q[log beta(a | s, z)] - KL(q(z | s, a) || p(z))."""
    if len(batch) == 0:
        raise ShapeError("cvae_update needs a nonempty batch")
    z_mean, z_log_std, enc_cache = encoder.distribution_cached(batch.states, batch.actions)
    noise = rng.standard_normal(z_mean.shape)
    z_std = np.exp(z_log_std)
    z = z_mean + z_std * noise

    mean, log_std, cache = policy.distribution_cached(batch.states, z)
    values, d_mean, d_log_std = gaussian_log_prob(mean, log_std, batch.actions)
    kl, d_kl_mean, d_kl_log_std = gaussian_kl(z_mean, z_log_std)
    recon, kl_mean = float(np.mean(values)), float(np.mean(kl))
    if not (np.isfinite(recon) and np.isfinite(kl_mean)):
        raise NumericalError("non-finite CVAE loss")

    rows = len(batch)
    d_encoder, d_head, d_z = policy.backward(cache, -d_mean / rows, -d_log_std / rows)
    d_z_mean = d_z + d_kl_mean / rows
    d_z_log_std = d_z * noise * z_std + d_kl_log_std / rows
    d_cvae = encoder.backward_distribution(enc_cache, d_z_mean, d_z_log_std)
    return (
        encoder.apply_gradient(d_cvae),
        policy.apply_gradient(d_encoder, d_head),
        CvaeLosses(recon=recon, kl=kl_mean),
    )
