from typing import Any
from typing import Iterator
from typing import Literal

import numpy as np
from pydantic import BaseModel
from pydantic import ConfigDict
from pydantic import Field
from pydantic import field_validator
from pydantic import model_validator

from embedding_mbo.core.errors import SchemaError

DecompositionRule = Literal["rank", "quantization", "random"]
InferenceRule = Literal["best", "grad", "best_ada", "grad_ada"]
ActionMode = Literal["mean", "sample"]


class ArrayModel(BaseModel):
    """Frozen pydantic model that may hold numpy arrays.

    Equality compares array fields elementwise, so two records loaded from the
    same bytes compare equal.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    def __eq__(self, other: Any) -> bool:
        if type(self) is not type(other):
            return NotImplemented
        for name in type(self).model_fields:
            left, right = getattr(self, name), getattr(other, name)
            if isinstance(left, np.ndarray) or isinstance(right, np.ndarray):
                if not np.array_equal(np.asarray(left), np.asarray(right)):
                    return False
            elif left != right:
                return False
        return True

    __hash__ = None


class MlpSpec(BaseModel):
    """Shape of a fully connected network.

    Parameters are laid out layer by layer, each layer as its weight matrix
    (output x input, row-major) followed by its bias vector.
    """

    model_config = ConfigDict(frozen=True)

    input_dim: int = Field(..., ge=1, description="Width of the input vector")
    hidden_dims: tuple[int, ...] = Field(
        default=(64, 64), description="Hidden layer widths (at most three layers)"
    )
    output_dim: int = Field(..., ge=1, description="Width of the output vector")
    activation: Literal["relu"] = Field("relu", description="Hidden activation")
    output_activation: Literal["identity", "tanh"] = Field(
        "identity", description="Elementwise map applied to the last affine layer"
    )

    @field_validator("hidden_dims")
    def check_hidden_dims(cls, value):
        if len(value) > 3:
            raise ValueError("at most three hidden layers are supported")
        if any(width < 1 for width in value):
            raise ValueError("hidden widths must be >= 1")
        return tuple(value)

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) for every affine layer."""
        widths = [self.input_dim, *self.hidden_dims, self.output_dim]
        return list(zip(widths[:-1], widths[1:]))

    @property
    def n_params(self) -> int:
        return sum(fan_out * fan_in + fan_out for fan_in, fan_out in self.layer_dims)


class AdamState(ArrayModel):
    """First/second moments and step counter of one Adam optimizer."""

    m: np.ndarray
    v: np.ndarray
    step: int = Field(0, ge=0)
    lr: float = Field(1e-3, ge=0)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, size: int, lr: float = 1e-3) -> "AdamState":
        return cls(m=np.zeros(size), v=np.zeros(size), lr=lr)


class Transition(ArrayModel):
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    next_action: np.ndarray | None = None
    terminal: bool = False


class TransitionBatch(ArrayModel):
    """A stack of transitions; row i of every array belongs to transition i.

    `next_valid` marks rows whose `next_actions` entry is a real recorded
    action; the other rows carry zeros there. Terminal rows are masked out of
    bootstrapping, so only non-terminal rows need a valid next action.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    next_actions: np.ndarray
    terminals: np.ndarray
    next_valid: np.ndarray

    def __len__(self) -> int:
        return len(self.rewards)

    def take(self, rows: np.ndarray) -> "TransitionBatch":
        return TransitionBatch(
            **{name: getattr(self, name)[rows] for name in type(self).model_fields}
        )

    @property
    def bootstrappable(self) -> np.ndarray:
        """Rows usable as TD samples: terminal, or with a recorded next action."""
        return self.terminals | self.next_valid

    def transitions(self) -> Iterator[Transition]:
        for i in range(len(self)):
            terminal = bool(self.terminals[i])
            has_next = bool(self.next_valid[i])
            yield Transition(
                state=self.states[i],
                action=self.actions[i],
                reward=float(self.rewards[i]),
                next_state=self.next_states[i],
                next_action=self.next_actions[i] if has_next else None,
                terminal=terminal,
            )


class Trajectory(ArrayModel):
    """One recorded episode.

    The file format stores no observation after the last action, so the last
    transition reuses its own state as `next_state`. That transition must be
    terminal to take part in TD learning.
    """

    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    terminals: np.ndarray
    policy: str | None = None

    @field_validator("observations", "actions", mode="before")
    def to_matrix(cls, value):
        array = np.asarray(value, dtype=np.float64)
        if array.size == 0:
            return array.reshape(0, array.shape[-1] if array.ndim == 2 else 0)
        if array.ndim != 2:
            raise ValueError("expected a list of vectors")
        return array

    @field_validator("rewards", mode="before")
    def to_rewards(cls, value):
        array = np.asarray(value, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(array)):
            raise ValueError("rewards must be finite")
        return array

    @field_validator("terminals", mode="before")
    def to_terminals(cls, value):
        return np.asarray(value, dtype=bool).reshape(-1)

    @model_validator(mode="after")
    def check_alignment(self):
        lengths = {
            len(self.observations),
            len(self.actions),
            len(self.rewards),
            len(self.terminals),
        }
        if len(lengths) != 1:
            raise ValueError(
                "observations, actions, rewards and terminals must have equal length"
            )
        return self

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def state_dim(self) -> int:
        return self.observations.shape[1]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]

    @property
    def episode_return(self) -> float:
        return float(np.sum(self.rewards))

    def to_batch(self) -> TransitionBatch:
        """All transitions of the episode, in order."""
        next_states = np.concatenate([self.observations[1:], self.observations[-1:]])
        next_actions = np.concatenate(
            [self.actions[1:], np.zeros_like(self.actions[-1:])]
        )
        return TransitionBatch(
            states=self.observations,
            actions=self.actions,
            rewards=self.rewards,
            next_states=next_states,
            next_actions=next_actions,
            terminals=self.terminals,
            next_valid=np.arange(len(self)) < len(self) - 1,
        )

    def to_record(self) -> dict:
        record = {
            "observations": self.observations.tolist(),
            "actions": self.actions.tolist(),
            "rewards": self.rewards.tolist(),
            "terminals": self.terminals.tolist(),
        }
        if self.policy is not None:
            record["policy"] = self.policy
        return record


class OfflineDataset(ArrayModel):
    trajectories: tuple[Trajectory, ...]
    state_dim: int = Field(..., ge=1)
    action_dim: int = Field(..., ge=1)
    env_name: str | None = None

    @field_validator("trajectories", mode="before")
    def to_tuple(cls, value):
        return tuple(value)

    @model_validator(mode="after")
    def check_dims(self):
        for index, traj in enumerate(self.trajectories):
            if traj.state_dim != self.state_dim or traj.action_dim != self.action_dim:
                raise SchemaError(
                    f"trajectory {index} has dims ({traj.state_dim}, {traj.action_dim}),"
                    f" expected ({self.state_dim}, {self.action_dim})"
                )
        return self

    def __len__(self) -> int:
        return len(self.trajectories)

    def __eq__(self, other: Any) -> bool:
        if not isinstance(other, OfflineDataset):
            return NotImplemented
        return (
            self.state_dim == other.state_dim
            and self.action_dim == other.action_dim
            and self.env_name == other.env_name
            and len(self) == len(other)
            and all(a == b for a, b in zip(self.trajectories, other.trajectories))
        )

    __hash__ = None

    def returns(self) -> np.ndarray:
        return np.array([traj.episode_return for traj in self.trajectories])

    def subset(self, indices: list[int]) -> "OfflineDataset":
        return OfflineDataset(
            trajectories=[self.trajectories[i] for i in indices],
            state_dim=self.state_dim,
            action_dim=self.action_dim,
            env_name=self.env_name,
        )

    def stacked(self, indices: list[int] | None = None) -> TransitionBatch:
        """Concatenate the transitions of the selected trajectories."""
        chosen = range(len(self)) if indices is None else indices
        batches = [self.trajectories[i].to_batch() for i in chosen]
        if not batches:
            width_s, width_a = self.state_dim, self.action_dim
            return TransitionBatch(
                states=np.zeros((0, width_s)),
                actions=np.zeros((0, width_a)),
                rewards=np.zeros(0),
                next_states=np.zeros((0, width_s)),
                next_actions=np.zeros((0, width_a)),
                terminals=np.zeros(0, dtype=bool),
                next_valid=np.zeros(0, dtype=bool),
            )
        return TransitionBatch(
            **{
                name: np.concatenate([getattr(b, name) for b in batches])
                for name in TransitionBatch.model_fields
            }
        )


class SubTaskPartition(BaseModel):
    model_config = ConfigDict(frozen=True)

    n_subtasks: int = Field(..., ge=1, description="N, the number of sub-tasks")
    max_size: int = Field(..., ge=1, description="M, trajectories per sub-task")
    subsets: tuple[tuple[int, ...], ...]
    rule: DecompositionRule

    @field_validator("subsets", mode="before")
    def to_tuples(cls, value):
        return tuple(tuple(int(i) for i in subset) for subset in value)

    @model_validator(mode="after")
    def check_subsets(self):
        if len(self.subsets) != self.n_subtasks:
            raise ValueError(f"expected {self.n_subtasks} subsets, got {len(self.subsets)}")
        seen: set[int] = set()
        for subset in self.subsets:
            if len(subset) > self.max_size:
                raise ValueError(f"subset of size {len(subset)} exceeds M={self.max_size}")
            if any(i < 0 for i in subset):
                raise ValueError("trajectory indices must be non-negative")
            if seen.intersection(subset) or len(set(subset)) != len(subset):
                raise ValueError("subsets must be pairwise disjoint")
            seen.update(subset)
        return self

    def check_indices(self, n_trajectories: int) -> None:
        for subset in self.subsets:
            if any(i >= n_trajectories for i in subset):
                raise SchemaError(
                    f"partition refers to trajectory >= {n_trajectories}"
                )


class InferenceConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    rule: InferenceRule = "grad_ada"
    K: int = Field(100, ge=0, description="Gradient ascent steps")
    alpha: float = Field(1e-2, gt=0, description="Gradient ascent step size")
    interval: int = Field(1, ge=1, description="States between re-inference")
    action_mode: ActionMode = "mean"
    warm_start: bool = Field(
        False, description="Also start adaptive ascent from the previous z*"
    )


class InferenceResult(ArrayModel):
    z_star: np.ndarray
    score: float
    origin_subtask: int
    steps_taken: int
    finite: bool = Field(True, description="False when the ascent stopped on a non-finite gradient")


class EpisodeRecord(ArrayModel):
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    z_stars: np.ndarray
    origins: tuple[int, ...] = ()
    inference_calls: int = 0
    status: Literal["ok", "truncated"] = "ok"

    @property
    def episode_return(self) -> float:
        return float(np.sum(self.rewards))

    @property
    def switches(self) -> int:
        """Number of steps at which the selected sub-task changed."""
        return int(sum(a != b for a, b in zip(self.origins[:-1], self.origins[1:])))


class MetricsRow(BaseModel):
    seed: int
    training_step: int
    checkpoint_id: int
    rule: str
    episode: int
    episode_return: float = Field(..., serialization_alias="return")
    normalized_return: float | None = None
    inference_calls: int
    wall_ms: float

    @field_validator("episode_return")
    def check_finite(cls, value):
        if not np.isfinite(value):
            raise ValueError("returns must be finite")
        return value
