"""
Training loop for the hybrid SAC agent on one continuing engine trajectory.

Randomness comes from four independent streams spawned from the run seed
(network init, behaviour actions, batch sampling, update noise), so a run is
a pure function of (config, seed).
"""

from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional

import numpy as np
import pandas as pd

from agent.buffer import ReplayBuffer
from agent.sac import NonFiniteLossError, PolicyController, SacAgent, UpdateStats, target_entropy_at
from engine.environment import Action, QuantumHeatEngineEnv, Rollout, run_schedule
from engine.qdyn import ProcessKind
from shared.checkpoint import Checkpoint, generator_state
from shared.config import get_logger
from shared.settings import TrainConfig

logger = get_logger(__name__)

RNG_STREAMS = ("init", "action", "buffer", "update")
TRAINING_LOG_COLUMNS = [
    "step", "L_Q", "L_pi", "alpha_D", "alpha_C", "H_D", "H_C", "Hbar_D", "Hbar_C", "eval_avg_power",
]
SNAPSHOT_COLUMNS = ["step", "k", "d", "u"]


class TrainingDivergedError(Exception):
    """Raised when a loss turns non-finite; carries the last finite checkpoint"""

    def __init__(self, message: str, checkpoint: Checkpoint):
        self.checkpoint = checkpoint
        super().__init__(message)


@dataclass
class TrainingResult:
    """Final agent state, training log and policy snapshots"""
    agent: SacAgent
    checkpoint: Checkpoint
    log: pd.DataFrame
    snapshots: pd.DataFrame
    best_eval_power: float = float("-inf")
    best_step: Optional[int] = None
    best_checkpoint: Optional[Checkpoint] = None


@dataclass
class _RunState:
    last_stats: Optional[UpdateStats] = None
    rows: List[Dict[str, Any]] = field(default_factory=list)
    snapshots: List[Dict[str, Any]] = field(default_factory=list)
    best_power: float = float("-inf")
    best_step: Optional[int] = None
    best_checkpoint: Optional[Checkpoint] = None


def spawn_generators(seed: int) -> Dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(RNG_STREAMS))
    return {name: np.random.default_rng(child) for name, child in zip(RNG_STREAMS, children)}


def evaluate_policy(agent: SacAgent, n_steps: int, gamma: float) -> Rollout:
    """Deterministic-policy rollout from reset on a fresh environment"""
    controller = PolicyController(agent.policy.copy(), agent.spec)
    return run_schedule(controller, n_steps, gamma, agent.spec)


def _uniform_action(env: QuantumHeatEngineEnv, rng: np.random.Generator) -> Action:
    d = ProcessKind.from_index(int(rng.integers(0, 3)))
    return Action(d=d, u=float(rng.uniform(env.spec.u_min, env.spec.u_max)))


def _rng_states(generators: Dict[str, np.random.Generator]) -> Dict[str, Dict[str, Any]]:
    return {name: generator_state(rng) for name, rng in generators.items()}


def _log_row(step: int, config: TrainConfig, stats: Optional[UpdateStats], agent: SacAgent, power: float) -> Dict[str, Any]:
    targets = target_entropy_at(config.entropy, step)
    return {
        "step": step,
        "L_Q": stats.critic_loss if stats else np.nan,
        "L_pi": stats.actor_loss if stats else np.nan,
        "alpha_D": agent.temperatures.alpha_d,
        "alpha_C": agent.temperatures.alpha_c,
        "H_D": stats.entropy_d if stats else np.nan,
        "H_C": stats.entropy_c if stats else np.nan,
        "Hbar_D": targets[0],
        "Hbar_C": targets[1],
        "eval_avg_power": power,
    }


def train(
    config: TrainConfig,
    env: QuantumHeatEngineEnv,
    seed: int,
    config_echo: Optional[Dict[str, Any]] = None,
    on_checkpoint: Optional[Callable[[Checkpoint], None]] = None,
) -> TrainingResult:
    """
    Run config.total_steps environment steps, updating the agent every
    update_every steps once warmup is over (the first round comes on a
    policy step, never on the last uniform one) and the buffer holds a batch.

    Args:
        config: Training parameters
        env: Environment; it is reset once with the run seed
        seed: Run seed
        config_echo: Configuration stored in every checkpoint
        on_checkpoint: Called with a checkpoint every checkpoint_every steps

    Raises:
        TrainingDivergedError: A loss became non-finite
    """
    generators = spawn_generators(seed)
    agent = SacAgent.create(config, env.spec, generators["init"])
    buffer = ReplayBuffer(config.buffer_size)
    run = _RunState()

    def checkpoint_at(step: int) -> Checkpoint:
        return agent.to_checkpoint(step, config_echo, _rng_states(generators))

    def evaluate(step: int) -> None:
        rollout = evaluate_policy(agent, config.eval_len, config.gamma)
        power = rollout.final_power
        run.rows.append(_log_row(step, config, run.last_stats, agent, power))
        tail = rollout.records[-config.snapshot_len:] if config.snapshot_len else []
        for k, record in enumerate(tail):
            run.snapshots.append({"step": step, "k": k, "d": record.process.value, "u": record.action.u})
        if power > run.best_power:
            run.best_power, run.best_step = power, step
            run.best_checkpoint = checkpoint_at(step)
        logger.info(
            f"Step {step}: eval <P> = {power:.6f}, alpha_D = {agent.temperatures.alpha_d:.4g}, "
            f"alpha_C = {agent.temperatures.alpha_c:.4g}"
        )

    obs, _ = env.reset(seed=seed)
    logger.info(f"Training for {config.total_steps} steps (seed {seed})")
    for step in range(1, config.total_steps + 1):
        if step <= config.warmup_steps:
            action = _uniform_action(env, generators["action"])
        else:
            action = agent.act(obs, "stochastic", generators["action"])
        next_obs, reward, _, _, _ = env.step(action)
        buffer.add(obs, action.d.action_index, action.u, reward, next_obs)
        obs = next_obs

        if step > config.warmup_steps and step % config.update_every == 0 and len(buffer) >= config.batch_size:
            for _ in range(config.updates_per_round):
                batch = buffer.sample(config.batch_size, generators["buffer"])
                try:
                    run.last_stats = agent.update(batch, step, generators["update"])
                except NonFiniteLossError as e:
                    logger.error(f"Training diverged at step {step}: {e}")
                    raise TrainingDivergedError(f"training diverged at step {step}: {e}", checkpoint_at(step)) from e

        if step % config.eval_every == 0:
            evaluate(step)
        if on_checkpoint is not None and step % config.checkpoint_every == 0:
            on_checkpoint(checkpoint_at(step))

    if config.total_steps and config.total_steps % config.eval_every:
        evaluate(config.total_steps)

    return TrainingResult(
        agent=agent,
        checkpoint=checkpoint_at(config.total_steps),
        log=pd.DataFrame(run.rows, columns=TRAINING_LOG_COLUMNS),
        snapshots=pd.DataFrame(run.snapshots, columns=SNAPSHOT_COLUMNS),
        best_eval_power=run.best_power,
        best_step=run.best_step,
        best_checkpoint=run.best_checkpoint,
    )
