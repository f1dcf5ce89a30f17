"""
Hybrid discrete/continuous soft actor-critic.

The policy picks a process d from a softmax and, for every branch d, a
tanh-squashed Gaussian scale u. Each Q network maps (observation, u) to one
value per process, so evaluating all branches is a single forward pass over
the three stacked branch inputs. Loss gradients are exposed as pure functions
of explicit noise, which makes them checkable against finite differences.
"""

from dataclasses import dataclass
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from agent.buffer import Batch
from agent.nn import (
    AdamState,
    MlpParams,
    MlpShapeError,
    MlpSpec,
    NonFiniteGradientError,
    ParamSet,
    adam_init,
    adam_step,
    backward,
    check_shapes,
    forward,
    init,
)
from engine.environment import OBS_DIM, Action, scale_to_unit, unit_to_scale
from engine.qdyn import PROCESS_ORDER, EngineSpec, ProcessKind
from shared.checkpoint import AdamPayload, ArrayPayload, Checkpoint, CheckpointIntegrityError
from shared.config import get_logger
from shared.settings import AdamConfig, EntropySchedule, TrainConfig

logger = get_logger(__name__)

N_PROCESSES = len(PROCESS_ORDER)
Q_INPUT_DIM = OBS_DIM + 1
LOG_2 = float(np.log(2.0))
LOG_2PI = float(np.log(2.0 * np.pi))

SamplingMode = Literal["stochastic", "deterministic"]


class NonFiniteLossError(Exception):
    """Raised when a loss or its gradient is NaN or infinite; carries batch diagnostics"""

    def __init__(self, loss_name: str, diagnostics: Dict[str, float]):
        self.loss_name = loss_name
        self.diagnostics = diagnostics
        details = ", ".join(f"{key}={value:.6g}" for key, value in diagnostics.items())
        super().__init__(f"non-finite {loss_name} ({details})")


def _batch_diagnostics(batch: Batch, **extra: float) -> Dict[str, float]:
    diagnostics = {
        "batch_size": float(len(batch)),
        "reward_mean": float(np.mean(batch.reward)),
        "reward_max_abs": float(np.max(np.abs(batch.reward))),
        "obs_max_abs": float(np.max(np.abs(batch.obs))),
    }
    diagnostics.update({key: float(value) for key, value in extra.items()})
    return diagnostics


# ============================================================================
# SQUASHED GAUSSIAN
# ============================================================================

def _log1m_tanh_sq(x: np.ndarray) -> np.ndarray:
    """log(1 - tanh(x)^2) without cancellation for large |x|"""
    return 2.0 * (LOG_2 - x - np.logaddexp(0.0, -2.0 * x))


def _half_range(spec: EngineSpec) -> float:
    return 0.5 * (spec.u_max - spec.u_min)


def squash(
    mu: np.ndarray, log_std: np.ndarray, noise: np.ndarray, spec: EngineSpec,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Reparameterized sample u = affine(tanh(mu + sigma * noise)).

    Returns:
        (u, y, log_prob) with y = tanh(.) in [-1, 1] and log_prob the density
        of u including the tanh and affine corrections
    """
    pre = mu + np.exp(log_std) * noise
    y = np.tanh(pre)
    u = np.clip(unit_to_scale(y, spec), spec.u_min, spec.u_max)
    log_prob = (
        -0.5 * noise ** 2 - log_std - 0.5 * LOG_2PI
        - np.log(_half_range(spec)) - _log1m_tanh_sq(pre)
    )
    return u, y, log_prob


def squashed_log_prob(u: Any, mu: float, log_std: float, spec: EngineSpec) -> Any:
    """Log density of u on the open interval (u_min, u_max)"""
    pre = np.arctanh(scale_to_unit(np.asarray(u, dtype=float), spec))
    noise = (pre - mu) / np.exp(log_std)
    return (
        -0.5 * noise ** 2 - log_std - 0.5 * LOG_2PI
        - np.log(_half_range(spec)) - _log1m_tanh_sq(pre)
    )


# ============================================================================
# POLICY
# ============================================================================

@dataclass(eq=False)
class PolicyHeads:
    """
    Policy networks.

    With a shared trunk one network emits 9 values (3 logits, 3 means,
    3 log standard deviations); otherwise a discrete network emits the logits
    and a continuous network the 6 Gaussian parameters.
    """
    nets: Tuple[MlpParams, ...]
    log_std_min: float = -20.0
    log_std_max: float = 2.0

    @property
    def shared_trunk(self) -> bool:
        return len(self.nets) == 1

    def arrays(self) -> List[np.ndarray]:
        return [array for net in self.nets for array in net.arrays()]

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "PolicyHeads":
        arrays = list(arrays)
        nets, offset = [], 0
        for net in self.nets:
            count = len(net.arrays())
            nets.append(net.with_arrays(arrays[offset:offset + count]))
            offset += count
        if offset != len(arrays):
            raise MlpShapeError(f"PolicyHeads: expected {offset} arrays, got {len(arrays)}")
        return PolicyHeads(nets=tuple(nets), log_std_min=self.log_std_min, log_std_max=self.log_std_max)

    def copy(self) -> "PolicyHeads":
        return self.with_arrays([array.copy() for array in self.arrays()])

    def network_arrays(self) -> Dict[str, List[np.ndarray]]:
        if self.shared_trunk:
            return {"policy": self.nets[0].arrays()}
        return {"policy_discrete": self.nets[0].arrays(), "policy_continuous": self.nets[1].arrays()}


def policy_specs(config: TrainConfig) -> Dict[str, MlpSpec]:
    hidden = tuple(config.hidden_dims)
    if config.shared_trunk:
        return {"policy": MlpSpec(input_dim=OBS_DIM, hidden_dims=hidden, output_dim=3 * N_PROCESSES)}
    return {
        "policy_discrete": MlpSpec(input_dim=OBS_DIM, hidden_dims=hidden, output_dim=N_PROCESSES),
        "policy_continuous": MlpSpec(input_dim=OBS_DIM, hidden_dims=hidden, output_dim=2 * N_PROCESSES),
    }


def policy_init(config: TrainConfig, rng: np.random.Generator) -> PolicyHeads:
    nets = tuple(init(spec, rng) for spec in policy_specs(config).values())
    return PolicyHeads(nets=nets, log_std_min=config.log_std_min, log_std_max=config.log_std_max)


@dataclass(frozen=True, eq=False)
class PolicyOutput:
    """Per-state policy quantities, each (batch, 3)"""
    logits: np.ndarray
    log_pi: np.ndarray
    pi: np.ndarray
    mu: np.ndarray
    log_std: np.ndarray
    log_std_mask: np.ndarray
    caches: Tuple[Any, ...]


def policy_forward(policy: PolicyHeads, obs: np.ndarray) -> PolicyOutput:
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    if policy.shared_trunk:
        out, cache = forward(policy.nets[0], obs)
        caches: Tuple[Any, ...] = (cache,)
        logits = out[:, :N_PROCESSES]
        mu = out[:, N_PROCESSES:2 * N_PROCESSES]
        raw_log_std = out[:, 2 * N_PROCESSES:]
    else:
        logits, cache_d = forward(policy.nets[0], obs)
        out_c, cache_c = forward(policy.nets[1], obs)
        caches = (cache_d, cache_c)
        mu = out_c[:, :N_PROCESSES]
        raw_log_std = out_c[:, N_PROCESSES:]

    log_pi = logits - logsumexp(logits, axis=1, keepdims=True)
    return PolicyOutput(
        logits=logits,
        log_pi=log_pi,
        pi=np.exp(log_pi),
        mu=mu,
        log_std=np.clip(raw_log_std, policy.log_std_min, policy.log_std_max),
        log_std_mask=(raw_log_std > policy.log_std_min) & (raw_log_std < policy.log_std_max),
        caches=caches,
    )


def _policy_backward(
    policy: PolicyHeads,
    out: PolicyOutput,
    d_logits: np.ndarray,
    d_mu: np.ndarray,
    d_log_std: np.ndarray,
) -> List[np.ndarray]:
    d_raw = d_log_std * out.log_std_mask
    if policy.shared_trunk:
        grads, _ = backward(policy.nets[0], out.caches[0], np.concatenate([d_logits, d_mu, d_raw], axis=1))
        return grads.arrays()
    grads_d, _ = backward(policy.nets[0], out.caches[0], d_logits)
    grads_c, _ = backward(policy.nets[1], out.caches[1], np.concatenate([d_mu, d_raw], axis=1))
    return grads_d.arrays() + grads_c.arrays()


def sample_action(
    policy: PolicyHeads,
    obs: np.ndarray,
    mode: SamplingMode,
    rng: Optional[np.random.Generator],
    spec: EngineSpec,
) -> Tuple[Action, float, float]:
    """
    Draw (d, u) for one observation.

    Stochastic mode samples d from the softmax and u from the branch's squashed
    Gaussian; deterministic mode takes the argmax process and tanh of the mean.

    Returns:
        (action, log pi_D(d|s), log pi_C(u|d,s))
    """
    out = policy_forward(policy, obs)
    if mode == "stochastic":
        if rng is None:
            raise ValueError("stochastic sampling needs a random generator")
        d = int(rng.choice(N_PROCESSES, p=out.pi[0]))
        noise = float(rng.standard_normal())
    elif mode == "deterministic":
        d = int(np.argmax(out.logits[0]))
        noise = 0.0
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")

    u, _, log_prob = squash(out.mu[0, d], out.log_std[0, d], noise, spec)
    return Action(d=ProcessKind.from_index(d), u=float(u)), float(out.log_pi[0, d]), float(log_prob)


def target_entropy_at(schedule: EntropySchedule, n_steps: int) -> Tuple[float, float]:
    """Exponentially decayed (H_D target, H_C target) after n_steps environment steps"""
    if n_steps < 0:
        raise ValueError(f"n_steps must be non-negative, got {n_steps}")
    discrete = schedule.discrete_final + (schedule.discrete_init - schedule.discrete_final) * np.exp(
        -n_steps / schedule.discrete_decay
    )
    continuous = schedule.continuous_final + (schedule.continuous_init - schedule.continuous_final) * np.exp(
        -n_steps / schedule.continuous_decay
    )
    return float(discrete), float(continuous)


# ============================================================================
# CRITICS AND TEMPERATURES
# ============================================================================

@dataclass(eq=False)
class QNetPair:
    """Twin online critics and their polyak-averaged targets"""
    online: Tuple[MlpParams, MlpParams]
    target: Tuple[MlpParams, MlpParams]


def q_spec(config: TrainConfig) -> MlpSpec:
    return MlpSpec(input_dim=Q_INPUT_DIM, hidden_dims=tuple(config.hidden_dims), output_dim=N_PROCESSES)


def qnets_init(config: TrainConfig, rng: np.random.Generator) -> QNetPair:
    spec = q_spec(config)
    online = (init(spec, rng), init(spec, rng))
    return QNetPair(online=online, target=(online[0].copy(), online[1].copy()))


@dataclass(frozen=True)
class LogTemperature:
    """Scalar log alpha as an optimizable parameter set"""
    value: float

    @property
    def alpha(self) -> float:
        return float(np.exp(self.value))

    def arrays(self) -> List[np.ndarray]:
        return [np.array([self.value])]

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "LogTemperature":
        check_shapes(self.arrays(), arrays, "LogTemperature")
        return LogTemperature(value=float(np.asarray(arrays[0]).reshape(-1)[0]))


@dataclass(frozen=True)
class Temperatures:
    discrete: LogTemperature
    continuous: LogTemperature

    @property
    def alpha_d(self) -> float:
        return self.discrete.alpha

    @property
    def alpha_c(self) -> float:
        return self.continuous.alpha


def _branch_inputs(obs: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Stack (obs, y_d) for d = 0..2 into a (3 * batch, 14) array, branch-major"""
    return np.concatenate([np.concatenate([obs, y[:, [d]]], axis=1) for d in range(N_PROCESSES)], axis=0)


def _branch_values(values: np.ndarray, batch_size: int) -> np.ndarray:
    """Pick output d of branch block d: (3 * batch, 3) -> (batch, 3)"""
    return np.stack(
        [values[d * batch_size:(d + 1) * batch_size, d] for d in range(N_PROCESSES)], axis=1,
    )


def _branch_output_grad(grad: np.ndarray) -> np.ndarray:
    batch_size = grad.shape[0]
    out = np.zeros((N_PROCESSES * batch_size, N_PROCESSES))
    for d in range(N_PROCESSES):
        out[d * batch_size:(d + 1) * batch_size, d] = grad[:, d]
    return out


def compute_q_target(
    batch: Batch,
    qnets: QNetPair,
    policy: PolicyHeads,
    temps: Temperatures,
    gamma: float,
    spec: EngineSpec,
    rng: Optional[np.random.Generator] = None,
    noise: Optional[np.ndarray] = None,
    samples: int = 1,
) -> np.ndarray:
    """
    Soft Bellman targets from the target critics.

    One u' is drawn per branch and sample; noise may be passed explicitly as
    (batch, 3) or (samples, batch, 3).
    """
    out = policy_forward(policy, batch.next_obs)
    batch_size = len(batch)
    if noise is None:
        if rng is None:
            raise ValueError("compute_q_target needs a random generator or explicit noise")
        noise = rng.standard_normal((samples, batch_size, N_PROCESSES))
    noise = np.asarray(noise, dtype=float)
    if noise.ndim == 2:
        noise = noise[None]

    soft_values = []
    for sample in noise:
        _, y, log_prob = squash(out.mu, out.log_std, sample, spec)
        inputs = _branch_inputs(batch.next_obs, y)
        q1 = _branch_values(forward(qnets.target[0], inputs)[0], batch_size)
        q2 = _branch_values(forward(qnets.target[1], inputs)[0], batch_size)
        soft_values.append(np.sum(out.pi * (np.minimum(q1, q2) - temps.alpha_c * log_prob), axis=1))

    entropy_d = -np.sum(out.pi * out.log_pi, axis=1)
    return batch.reward + gamma * (np.mean(soft_values, axis=0) + temps.alpha_d * entropy_d)


def critic_loss_and_grads(
    qnet: MlpParams, batch: Batch, y: np.ndarray, spec: EngineSpec,
) -> Tuple[float, Any]:
    """Half squared error of the stored action's Q value against y"""
    inputs = np.concatenate([batch.obs, scale_to_unit(batch.u, spec)[:, None]], axis=1)
    out, cache = forward(qnet, inputs)
    rows = np.arange(len(batch))
    diff = out[rows, batch.d] - y
    grad_out = np.zeros_like(out)
    grad_out[rows, batch.d] = diff / len(batch)
    grads, _ = backward(qnet, cache, grad_out)
    return float(0.5 * np.mean(diff ** 2)), grads


def critic_update(
    batch: Batch,
    qnets: QNetPair,
    y: np.ndarray,
    optimizers: Tuple[AdamState, AdamState],
    spec: EngineSpec,
) -> Tuple[QNetPair, Tuple[AdamState, AdamState], float]:
    """
    One Adam step on each online critic.

    Returns:
        (critics, optimizer states, mean of the two losses)
    """
    online, states, losses = [], [], []
    for index, (net, state) in enumerate(zip(qnets.online, optimizers)):
        loss, grads = critic_loss_and_grads(net, batch, y, spec)
        if not np.isfinite(loss):
            raise NonFiniteLossError("L_Q", _batch_diagnostics(batch, critic=index, target_mean=np.mean(y)))
        try:
            net, state = adam_step(net, grads, state)
        except NonFiniteGradientError as e:
            raise NonFiniteLossError("L_Q", _batch_diagnostics(batch, critic=index)) from e
        online.append(net)
        states.append(state)
        losses.append(loss)
    return QNetPair(online=tuple(online), target=qnets.target), tuple(states), float(np.mean(losses))


@dataclass(frozen=True)
class ActorTerms:
    """Loss and batch-mean policy entropies"""
    loss: float
    entropy_d: float
    entropy_c: float


def actor_loss_and_grads(
    policy: PolicyHeads,
    critics: Sequence[MlpParams],
    temps: Temperatures,
    obs: np.ndarray,
    noise: np.ndarray,
    spec: EngineSpec,
) -> Tuple[ActorTerms, List[np.ndarray]]:
    """
    Policy loss E_s[sum_d pi_D (alpha_D log pi_D + alpha_C log pi_C - min_j Q_j)]
    with reparameterized u per branch, and its gradient w.r.t. the policy.
    """
    out = policy_forward(policy, obs)
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    batch_size = obs.shape[0]
    _, y, log_prob = squash(out.mu, out.log_std, noise, spec)

    inputs = _branch_inputs(obs, y)
    evaluated = [forward(net, inputs) for net in critics]
    q1 = _branch_values(evaluated[0][0], batch_size)
    q2 = _branch_values(evaluated[1][0], batch_size)
    first = q1 <= q2
    q_min = np.where(first, q1, q2)

    advantage = temps.alpha_d * out.log_pi + temps.alpha_c * log_prob - q_min
    per_state = np.sum(out.pi * advantage, axis=1)
    loss = float(np.mean(per_state))

    d_logits = out.pi * (advantage - per_state[:, None]) / batch_size
    d_q_min = -out.pi / batch_size
    d_y = np.zeros_like(y)
    for (net, (_, cache)), mask in zip(zip(critics, evaluated), (first, ~first)):
        _, grad_inputs = backward(net, cache, _branch_output_grad(d_q_min * mask))
        d_y += grad_inputs[:, -1].reshape(N_PROCESSES, batch_size).T

    d_log_prob = temps.alpha_c * out.pi / batch_size
    d_pre = d_y * (1.0 - y ** 2) + d_log_prob * 2.0 * y
    d_log_std = d_pre * np.exp(out.log_std) * noise - d_log_prob
    grads = _policy_backward(policy, out, d_logits, d_pre, d_log_std)

    terms = ActorTerms(
        loss=loss,
        entropy_d=float(np.mean(-np.sum(out.pi * out.log_pi, axis=1))),
        entropy_c=float(np.mean(-np.sum(out.pi * log_prob, axis=1))),
    )
    return terms, grads


def actor_update(
    batch: Batch,
    policy: PolicyHeads,
    qnets: QNetPair,
    temps: Temperatures,
    state: AdamState,
    spec: EngineSpec,
    rng: np.random.Generator,
) -> Tuple[PolicyHeads, AdamState, ActorTerms]:
    """One Adam step on the policy; the critics are only read"""
    noise = rng.standard_normal((len(batch), N_PROCESSES))
    terms, grads = actor_loss_and_grads(policy, qnets.online, temps, batch.obs, noise, spec)
    if not np.isfinite(terms.loss):
        raise NonFiniteLossError("L_pi", _batch_diagnostics(batch, alpha_d=temps.alpha_d, alpha_c=temps.alpha_c))
    try:
        policy, state = adam_step(policy, grads, state)
    except NonFiniteGradientError as e:
        raise NonFiniteLossError("L_pi", _batch_diagnostics(batch)) from e
    return policy, state, terms


def policy_entropies(
    policy: PolicyHeads, obs: np.ndarray, noise: np.ndarray, spec: EngineSpec,
) -> Tuple[float, float]:
    """Batch-mean discrete and continuous entropies (single-sample H_C)"""
    out = policy_forward(policy, obs)
    _, _, log_prob = squash(out.mu, out.log_std, noise, spec)
    return (
        float(np.mean(-np.sum(out.pi * out.log_pi, axis=1))),
        float(np.mean(-np.sum(out.pi * log_prob, axis=1))),
    )


def temperature_loss_and_grads(
    temps: Temperatures, entropies: Tuple[float, float], targets: Tuple[float, float],
) -> Tuple[Tuple[float, float], Tuple[float, float]]:
    """
    L_alpha = alpha * (H - H_target) per head; d/d(log alpha) equals the loss
    itself.
    """
    loss_d = temps.alpha_d * (entropies[0] - targets[0])
    loss_c = temps.alpha_c * (entropies[1] - targets[1])
    return (loss_d, loss_c), (loss_d, loss_c)


def temperature_update(
    temps: Temperatures,
    optimizers: Tuple[AdamState, AdamState],
    entropies: Tuple[float, float],
    targets: Tuple[float, float],
) -> Tuple[Temperatures, Tuple[AdamState, AdamState], Tuple[float, float]]:
    """Adam step on log alpha_D and log alpha_C; entropies enter as constants"""
    losses, grads = temperature_loss_and_grads(temps, entropies, targets)
    if not np.all(np.isfinite(losses)):
        raise NonFiniteLossError("L_alpha", {"entropy_d": entropies[0], "entropy_c": entropies[1]})
    discrete, state_d = adam_step(temps.discrete, [np.array([grads[0]])], optimizers[0])
    continuous, state_c = adam_step(temps.continuous, [np.array([grads[1]])], optimizers[1])
    return Temperatures(discrete=discrete, continuous=continuous), (state_d, state_c), losses


def polyak_update(online: ParamSet, target: ParamSet, tau: float) -> ParamSet:
    """target <- tau * online + (1 - tau) * target, elementwise"""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    online_arrays, target_arrays = online.arrays(), target.arrays()
    check_shapes(target_arrays, online_arrays, "polyak")
    return target.with_arrays([tau * o + (1.0 - tau) * t for o, t in zip(online_arrays, target_arrays)])


# ============================================================================
# AGENT
# ============================================================================

OPTIMIZER_NAMES = ("policy", "q1", "q2", "alpha_d", "alpha_c")
Q_NETWORK_NAMES = ("q1", "q2", "q1_target", "q2_target")


@dataclass(frozen=True)
class UpdateStats:
    critic_loss: float
    actor_loss: float
    alpha_loss_d: float
    alpha_loss_c: float
    alpha_d: float
    alpha_c: float
    entropy_d: float
    entropy_c: float
    target_entropy_d: float
    target_entropy_c: float


@dataclass(eq=False)
class SacAgent:
    """All learnable state of the hybrid SAC learner"""
    config: TrainConfig
    spec: EngineSpec
    policy: PolicyHeads
    qnets: QNetPair
    temperatures: Temperatures
    optimizers: Dict[str, AdamState]

    @classmethod
    def create(cls, config: TrainConfig, spec: EngineSpec, rng: np.random.Generator) -> "SacAgent":
        policy = policy_init(config, rng)
        qnets = qnets_init(config, rng)
        temperatures = Temperatures(
            discrete=LogTemperature(config.initial_log_alpha_d),
            continuous=LogTemperature(config.initial_log_alpha_c),
        )
        optimizers = {
            "policy": adam_init(policy, config.adam),
            "q1": adam_init(qnets.online[0], config.adam),
            "q2": adam_init(qnets.online[1], config.adam),
            "alpha_d": adam_init(temperatures.discrete, config.adam),
            "alpha_c": adam_init(temperatures.continuous, config.adam),
        }
        return cls(config, spec, policy, qnets, temperatures, optimizers)

    def act(self, obs: np.ndarray, mode: SamplingMode, rng: Optional[np.random.Generator] = None) -> Action:
        return sample_action(self.policy, obs, mode, rng, self.spec)[0]

    def update(self, batch: Batch, n_env_steps: int, rng: np.random.Generator) -> UpdateStats:
        """
        One gradient round: critic, actor, temperatures, then polyak.

        State is committed only after every step succeeded, so a
        NonFiniteLossError leaves the agent at its last finite parameters.
        """
        cfg = self.config
        y = compute_q_target(
            batch, self.qnets, self.policy, self.temperatures, cfg.gamma, self.spec,
            rng=rng, samples=cfg.target_samples,
        )
        qnets, (state_q1, state_q2), critic_loss = critic_update(
            batch, self.qnets, y, (self.optimizers["q1"], self.optimizers["q2"]), self.spec,
        )
        policy, state_pi, terms = actor_update(
            batch, self.policy, qnets, self.temperatures, self.optimizers["policy"], self.spec, rng,
        )
        targets = target_entropy_at(cfg.entropy, n_env_steps)
        temperatures, (state_d, state_c), (loss_d, loss_c) = temperature_update(
            self.temperatures,
            (self.optimizers["alpha_d"], self.optimizers["alpha_c"]),
            (terms.entropy_d, terms.entropy_c),
            targets,
        )
        targets_q = tuple(polyak_update(o, t, cfg.tau) for o, t in zip(qnets.online, qnets.target))

        self.qnets = QNetPair(online=qnets.online, target=targets_q)
        self.policy = policy
        self.temperatures = temperatures
        self.optimizers = {
            "policy": state_pi, "q1": state_q1, "q2": state_q2, "alpha_d": state_d, "alpha_c": state_c,
        }
        return UpdateStats(
            critic_loss=critic_loss,
            actor_loss=terms.loss,
            alpha_loss_d=loss_d,
            alpha_loss_c=loss_c,
            alpha_d=temperatures.alpha_d,
            alpha_c=temperatures.alpha_c,
            entropy_d=terms.entropy_d,
            entropy_c=terms.entropy_c,
            target_entropy_d=targets[0],
            target_entropy_c=targets[1],
        )

    def to_checkpoint(
        self,
        step: int,
        config_echo: Optional[Dict[str, Any]] = None,
        rng_state: Optional[Dict[str, Dict[str, Any]]] = None,
    ) -> Checkpoint:
        networks = dict(self.policy.network_arrays())
        for name, net in zip(Q_NETWORK_NAMES, (*self.qnets.online, *self.qnets.target)):
            networks[name] = net.arrays()
        return Checkpoint(
            step=step,
            config=config_echo or {},
            networks={
                name: [ArrayPayload.from_array(array) for array in arrays]
                for name, arrays in networks.items()
            },
            optimizers={
                name: AdamPayload(
                    step=state.step,
                    m=[ArrayPayload.from_array(array) for array in state.m],
                    v=[ArrayPayload.from_array(array) for array in state.v],
                )
                for name, state in self.optimizers.items()
            },
            temperatures={
                "log_alpha_d": self.temperatures.discrete.value,
                "log_alpha_c": self.temperatures.continuous.value,
            },
            rng_state=rng_state or {},
        )

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint, config: TrainConfig, spec: EngineSpec) -> "SacAgent":
        """
        Rebuild an agent, checking every stored layer against the configured
        architecture.

        Raises:
            CheckpointIntegrityError: Missing entries or mismatched layer shapes
        """
        policy_nets = tuple(
            _restore_network(checkpoint, name, expected) for name, expected in policy_specs(config).items()
        )
        policy = PolicyHeads(nets=policy_nets, log_std_min=config.log_std_min, log_std_max=config.log_std_max)
        critics = [_restore_network(checkpoint, name, q_spec(config)) for name in Q_NETWORK_NAMES]
        qnets = QNetPair(online=(critics[0], critics[1]), target=(critics[2], critics[3]))

        try:
            temperatures = Temperatures(
                discrete=LogTemperature(checkpoint.temperatures["log_alpha_d"]),
                continuous=LogTemperature(checkpoint.temperatures["log_alpha_c"]),
            )
        except KeyError as e:
            raise CheckpointIntegrityError(f"temperature {e} missing from checkpoint") from e

        owners = {
            "policy": policy,
            "q1": qnets.online[0],
            "q2": qnets.online[1],
            "alpha_d": temperatures.discrete,
            "alpha_c": temperatures.continuous,
        }
        optimizers = {
            name: _restore_optimizer(checkpoint, name, owner, config.adam) for name, owner in owners.items()
        }
        return cls(config, spec, policy, qnets, temperatures, optimizers)


def _restore_network(checkpoint: Checkpoint, name: str, expected: MlpSpec) -> MlpParams:
    if name not in checkpoint.networks:
        raise CheckpointIntegrityError(f"network {name!r} missing from checkpoint")
    try:
        params = MlpParams.from_arrays([payload.to_array() for payload in checkpoint.networks[name]])
    except MlpShapeError as e:
        raise CheckpointIntegrityError(f"network {name!r}: {e}") from e

    found, wanted = params.spec.layer_shapes, expected.layer_shapes
    if len(found) != len(wanted):
        raise CheckpointIntegrityError(f"network {name!r} has {len(found)} layers, expected {len(wanted)}")
    for layer, (got, want) in enumerate(zip(found, wanted)):
        if got != want:
            raise CheckpointIntegrityError(f"network {name!r} layer {layer}: shape {got}, expected {want}")
    return params


def _restore_optimizer(checkpoint: Checkpoint, name: str, owner: ParamSet, config: AdamConfig) -> AdamState:
    if name not in checkpoint.optimizers:
        raise CheckpointIntegrityError(f"optimizer {name!r} missing from checkpoint")
    payload = checkpoint.optimizers[name]
    state = AdamState(
        m=[p.to_array() for p in payload.m],
        v=[p.to_array() for p in payload.v],
        step=payload.step,
        config=config,
    )
    try:
        check_shapes(owner.arrays(), state.m, f"optimizer {name!r}")
    except MlpShapeError as e:
        raise CheckpointIntegrityError(str(e)) from e
    return state


class PolicyController:
    """Deterministic policy as a rollout controller"""

    def __init__(self, policy: PolicyHeads, spec: EngineSpec):
        self.policy = policy
        self.spec = spec

    def reset(self) -> None:
        pass

    def act(self, obs: np.ndarray, step: int) -> Action:
        return sample_action(self.policy, obs, "deterministic", None, self.spec)[0]
