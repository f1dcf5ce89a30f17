"""
Factories for engine states, tiny networks and training batches

Provides small, deterministic objects so the tests can exercise the physics,
the networks and the learner without the full-size defaults.
"""

from typing import Optional, Sequence

import numpy as np

from agent.buffer import Batch
from agent.nn import MlpParams, MlpSpec
from agent.sac import SacAgent
from engine.environment import OBS_DIM
from engine.qdyn import EngineSpec
from shared.settings import AdamConfig, EntropySchedule, TrainConfig


def random_density_matrix(rng: np.random.Generator, dim: int = 3) -> np.ndarray:
    """
    Create a random full-rank density matrix

    Args:
        rng: Random generator
        dim: Hilbert-space dimension

    Returns:
        Hermitian, positive definite matrix with unit trace
    """
    a = rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))
    rho = a @ a.conj().T
    return rho / np.trace(rho).real


def diagonal_state(populations: Sequence[float]) -> np.ndarray:
    """Density matrix with the given populations and no coherences"""
    return np.diag(np.asarray(populations, dtype=float)).astype(complex)


def create_train_config(**overrides) -> TrainConfig:
    """
    Create a training config small enough for unit tests

    Args:
        **overrides: Any TrainConfig field

    Returns:
        TrainConfig with (8, 8) hidden layers and short schedules
    """
    values = dict(
        gamma=0.9,
        tau=0.05,
        batch_size=16,
        buffer_size=256,
        total_steps=60,
        warmup_steps=20,
        update_every=10,
        updates_per_round=2,
        eval_every=30,
        eval_len=12,
        snapshot_len=4,
        checkpoint_every=30,
        hidden_dims=(8, 8),
        adam=AdamConfig(learning_rate=1e-3),
        entropy=EntropySchedule(discrete_decay=100.0, continuous_decay=100.0),
    )
    values.update(overrides)
    return TrainConfig(**values)


def create_batch(
    rng: np.random.Generator,
    batch_size: int = 8,
    spec: Optional[EngineSpec] = None,
) -> Batch:
    """
    Create a batch of plausible transitions

    Observations carry random populations, small coherences, a scaled u in
    [-1, 1] and a one-hot previous process.

    Args:
        rng: Random generator
        batch_size: Number of transitions
        spec: Engine spec for the u bounds

    Returns:
        Batch with every field filled
    """
    spec = spec or EngineSpec()

    def observations() -> np.ndarray:
        obs = np.zeros((batch_size, OBS_DIM))
        obs[:, :3] = rng.dirichlet(np.ones(3), size=batch_size)
        obs[:, 3:9] = 0.05 * rng.standard_normal((batch_size, 6))
        obs[:, 9] = rng.uniform(-1.0, 1.0, size=batch_size)
        obs[np.arange(batch_size), 10 + rng.integers(0, 3, size=batch_size)] = 1.0
        return obs

    return Batch(
        obs=observations(),
        d=rng.integers(0, 3, size=batch_size).astype(np.int64),
        u=rng.uniform(spec.u_min, spec.u_max, size=batch_size),
        reward=0.1 * rng.standard_normal(batch_size),
        next_obs=observations(),
    )


def create_agent(seed: int = 0, config: Optional[TrainConfig] = None, spec: Optional[EngineSpec] = None) -> SacAgent:
    """Create a tiny agent from a fixed seed"""
    return SacAgent.create(config or create_train_config(), spec or EngineSpec(), np.random.default_rng(seed))


def constant_q_net(values: Sequence[float], input_dim: int = OBS_DIM + 1, hidden: int = 4) -> MlpParams:
    """
    Create a critic whose output is the same for every input

    Args:
        values: Output per process (Hot, Cold, Work)
        input_dim: Network input width
        hidden: Width of the single hidden layer

    Returns:
        MlpParams with zero weights and the values as output bias
    """
    values = np.asarray(values, dtype=float)
    spec = MlpSpec(input_dim=input_dim, hidden_dims=(hidden,), output_dim=len(values))
    return MlpParams(
        spec=spec,
        weights=[np.zeros((input_dim, hidden)), np.zeros((hidden, len(values)))],
        biases=[np.zeros(hidden), values.copy()],
    )
