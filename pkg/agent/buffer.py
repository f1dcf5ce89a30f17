"""
Fixed-capacity FIFO replay memory of environment transitions.
"""

from dataclasses import dataclass

import numpy as np

from engine.environment import OBS_DIM


class BufferUnderfilledError(Exception):
    """Raised when a batch larger than the buffer's contents is requested"""
    pass


@dataclass(frozen=True, eq=False)
class Batch:
    """Transitions sampled with replacement; d holds process indices"""
    obs: np.ndarray
    d: np.ndarray
    u: np.ndarray
    reward: np.ndarray
    next_obs: np.ndarray

    def __len__(self) -> int:
        return len(self.reward)


class ReplayBuffer:
    """
    Ring buffer over preallocated arrays.

    Once full, each new transition overwrites the oldest one.
    """

    def __init__(self, capacity: int, obs_dim: int = OBS_DIM):
        if capacity <= 0:
            raise ValueError(f"capacity must be positive, got {capacity}")
        self.capacity = capacity
        self._obs = np.zeros((capacity, obs_dim))
        self._next_obs = np.zeros((capacity, obs_dim))
        self._d = np.zeros(capacity, dtype=np.int64)
        self._u = np.zeros(capacity)
        self._reward = np.zeros(capacity)
        self._cursor = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def add(self, obs: np.ndarray, d: int, u: float, reward: float, next_obs: np.ndarray) -> None:
        index = self._cursor
        self._obs[index] = obs
        self._d[index] = int(d)
        self._u[index] = u
        self._reward[index] = reward
        self._next_obs[index] = next_obs
        self._cursor = (index + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def _ordered_indices(self) -> np.ndarray:
        if self._size < self.capacity:
            return np.arange(self._size)
        return (np.arange(self.capacity) + self._cursor) % self.capacity

    def transitions(self) -> Batch:
        """All stored transitions, oldest first"""
        return self._gather(self._ordered_indices())

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        """
        Draw batch_size transitions uniformly with replacement.

        Raises:
            BufferUnderfilledError: Fewer than batch_size transitions stored
        """
        if batch_size > self._size:
            raise BufferUnderfilledError(
                f"requested {batch_size} transitions, buffer holds {self._size}"
            )
        return self._gather(rng.integers(0, self._size, size=batch_size))

    def _gather(self, indices: np.ndarray) -> Batch:
        return Batch(
            obs=self._obs[indices].copy(),
            d=self._d[indices].copy(),
            u=self._u[indices].copy(),
            reward=self._reward[indices].copy(),
            next_obs=self._next_obs[indices].copy(),
        )
