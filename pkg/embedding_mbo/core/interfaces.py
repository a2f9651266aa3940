from abc import ABC
from abc import abstractmethod
from typing import Any

import numpy as np


class BaseEnv(ABC):
    """A deterministic-given-seed episodic environment."""

    name: str = "env"
    state_dim: int
    action_dim: int
    max_steps: int

    @abstractmethod
    def reset(self, seed: int | None = None) -> np.ndarray:
        """Start a new episode.

        Args:
            seed: Seed for any randomness in the initial state.

        Returns:
            np.ndarray: The initial state.
        """
        pass

    @abstractmethod
    def step(self, action: np.ndarray) -> tuple[np.ndarray, float, bool]:
        """Advance one step.

        Args:
            action: Action vector of length `action_dim`.

        Returns:
            tuple: (next_state, reward, terminal)

        Raises:
            EnvironmentFault: If called after the episode terminated.
        """
        pass


class BaseEmbedding(ABC):
    """Source of in-distribution behavior embeddings z.

    Implementations own their network parameters and optimizer state, and
    report the box `[-support, support]^d` that the out-of-distribution prior
    is uniform over.
    """

    @property
    @abstractmethod
    def dim(self) -> int:
        pass

    @property
    @abstractmethod
    def support(self) -> float:
        pass

    @abstractmethod
    def candidates(self) -> np.ndarray:
        """In-distribution embeddings used as inference starting points, shape (N, d)."""
        pass

    @abstractmethod
    def encode(self, states: np.ndarray, actions: np.ndarray, n: int | None) -> tuple[np.ndarray, Any]:
        """Embeddings for a batch, one row per transition, plus a backward cache."""
        pass

    @abstractmethod
    def backward(self, cache: Any, d_z: np.ndarray) -> np.ndarray:
        """Parameter gradient given the gradient with respect to the encoded rows."""
        pass

    @abstractmethod
    def apply_gradient(self, grads: np.ndarray) -> "BaseEmbedding":
        """Return a copy after one optimizer step."""
        pass


class BaseObjective(ABC):
    """Score landscape over embeddings at a fixed state."""

    @abstractmethod
    def value_and_grad(self, state: np.ndarray, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Scores and their z-gradients for a stack of embeddings.

        Args:
            state: A single state vector.
            z: Embeddings, shape (n, d).

        Returns:
            tuple: scores of shape (n,) and gradients of shape (n, d).
        """
        pass

    def value(self, state: np.ndarray, z: np.ndarray) -> np.ndarray:
        return self.value_and_grad(state, z)[0]
