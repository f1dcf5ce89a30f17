"""
Stepped control environment around the three-level engine.

The environment is a continuing task: it never terminates, and evaluation
runs are fresh fixed-length rollouts from reset. Each step applies one
stroke (process d at scale u) for one control interval and rewards the
internal-energy change rate of thermal strokes.
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple, Union

import gymnasium as gym
import numpy as np
import pandas as pd
from gymnasium import spaces
from pydantic import BaseModel, ConfigDict
from scipy.signal import lfilter

from engine.qdyn import (
    EngineSpec,
    PROCESS_ORDER,
    ProcessKind,
    QdynError,
    build_hamiltonian,
    encode_density_matrix,
    expectation_energy,
    gibbs_state,
    lindblad_propagate,
    process_params,
)
from engine.schedule import CycleSchedule, ScheduledAction
from shared.config import get_logger

logger = get_logger(__name__)

OBS_DIM = 13
RHO_SLICE = slice(0, 9)
TRAJECTORY_COLUMNS = [
    "step", "d", "u", "reward", "p0", "p1", "p2", "re_rho12", "im_rho12", "avg_power",
]


class ActionOutOfBoundsError(Exception):
    """Raised when an action's u or process index is invalid"""
    pass


class EnvironmentNotResetError(Exception):
    """Raised when step() is called before reset()"""
    pass


class RolloutError(Exception):
    """Raised when propagation fails during a rollout; carries the step index"""

    def __init__(self, step: int, cause: Exception):
        self.step = step
        self.cause = cause
        super().__init__(f"rollout failed at step {step}: {cause}")


class DiscountDomainError(Exception):
    """Raised when a discount factor is outside [0, 1)"""
    pass


class Action(BaseModel):
    """Hybrid action: discrete process and continuous Hamiltonian scale"""
    model_config = ConfigDict(frozen=True)

    d: ProcessKind
    u: float


def as_action(raw: Any, spec: EngineSpec) -> Action:
    """
    Coerce an Action, ScheduledAction or gymnasium sample (index, [u]) into an
    Action and check its bounds.
    """
    if isinstance(raw, (Action, ScheduledAction)):
        d, u = raw.d, raw.u
    else:
        try:
            index, u = raw
        except (TypeError, ValueError) as e:
            raise ActionOutOfBoundsError(f"cannot interpret action {raw!r}") from e
        u = float(np.asarray(u, dtype=float).reshape(-1)[0])
        if isinstance(index, ProcessKind):
            d = index
        else:
            try:
                d = ProcessKind.from_index(int(index))
            except QdynError as e:
                raise ActionOutOfBoundsError(str(e)) from e
    u = float(u)
    if not np.isfinite(u) or not spec.u_min <= u <= spec.u_max:
        raise ActionOutOfBoundsError(f"u = {u} outside [{spec.u_min}, {spec.u_max}]")
    return Action(d=d, u=u)


def scale_to_unit(u: float, spec: EngineSpec) -> float:
    """Affine map [u_min, u_max] -> [-1, 1]"""
    return 2.0 * (u - spec.u_min) / (spec.u_max - spec.u_min) - 1.0


def unit_to_scale(y: Union[float, np.ndarray], spec: EngineSpec) -> Union[float, np.ndarray]:
    """Affine map [-1, 1] -> [u_min, u_max]"""
    center = 0.5 * (spec.u_max + spec.u_min)
    half_range = 0.5 * (spec.u_max - spec.u_min)
    return center + half_range * y


@dataclass(frozen=True)
class StepRecord:
    """One environment transition with its energy bookkeeping"""
    step: int
    obs: np.ndarray
    action: Action
    reward: float
    next_obs: np.ndarray
    delta_E: float
    process: ProcessKind
    info: Dict[str, Any] = field(default_factory=dict)


class QuantumHeatEngineEnv(gym.Env):
    """
    Three-level engine as a gymnasium environment.

    Observation (13 values): populations, (Re, Im) of the three upper
    coherences, previous u mapped to [-1, 1], one-hot of the previous process
    (all zeros after reset).

    Action: Tuple(Discrete(3), Box(u_min, u_max)) with process order
    Hot, Cold, Work.
    """

    metadata = {"render_modes": []}

    def __init__(self, spec: Optional[EngineSpec] = None):
        super().__init__()
        self.spec = spec or EngineSpec()
        self.action_space = spaces.Tuple((
            spaces.Discrete(len(PROCESS_ORDER)),
            spaces.Box(low=self.spec.u_min, high=self.spec.u_max, shape=(1,), dtype=np.float64),
        ))
        self.observation_space = spaces.Box(low=-1.0, high=1.0, shape=(OBS_DIM,), dtype=np.float64)
        self._processes = {kind: process_params(kind, self.spec) for kind in ProcessKind}
        self._rho: Optional[np.ndarray] = None
        self._hamiltonian_end: Optional[np.ndarray] = None
        self._u_prev = self.spec.initial_u
        self._d_prev: Optional[ProcessKind] = None
        self._steps = 0

    @property
    def state(self) -> np.ndarray:
        """Copy of the current density matrix"""
        if self._rho is None:
            raise EnvironmentNotResetError("environment has not been reset")
        return self._rho.copy()

    @property
    def steps_taken(self) -> int:
        return self._steps

    def _observation(self) -> np.ndarray:
        obs = np.zeros(OBS_DIM, dtype=np.float64)
        obs[RHO_SLICE] = encode_density_matrix(self._rho)
        obs[9] = scale_to_unit(self._u_prev, self.spec)
        if self._d_prev is not None:
            obs[10 + self._d_prev.action_index] = 1.0
        return obs

    def reset(
        self,
        *,
        seed: Optional[int] = None,
        options: Optional[Dict[str, Any]] = None,
    ) -> Tuple[np.ndarray, Dict[str, Any]]:
        """Gibbs state of the initial Hamiltonian, previous action cleared"""
        super().reset(seed=seed)
        hamiltonian = build_hamiltonian(self.spec, self.spec.initial_u, 0.0, drive_on=False)
        self._rho = gibbs_state(hamiltonian, self.spec.initial_beta)
        self._hamiltonian_end = hamiltonian
        self._u_prev = self.spec.initial_u
        self._d_prev = None
        self._steps = 0
        return self._observation(), {}

    def step(self, action: Any) -> Tuple[np.ndarray, float, bool, bool, Dict[str, Any]]:
        """
        Apply one stroke.

        Returns:
            (observation, reward, terminated, truncated, info); terminated and
            truncated are always False. info holds heat_into_system_h,
            heat_into_system_c, work_out (drive work of a Work stroke),
            quench_work_out (energy released by switching the Hamiltonian at
            stroke start), delta_E and the process name.
        """
        if self._rho is None:
            raise EnvironmentNotResetError("call reset() before step()")
        action = as_action(action, self.spec)
        process = self._processes[action.d]
        dt = self.spec.dt

        hamiltonian_start = build_hamiltonian(self.spec, action.u, 0.0, process.drive_on)
        quench = (
            expectation_energy(self._rho, hamiltonian_start)
            - expectation_energy(self._rho, self._hamiltonian_end)
        )
        rho_next = lindblad_propagate(self._rho, process, action.u, dt, self.spec)
        hamiltonian_end = build_hamiltonian(self.spec, action.u, dt, process.drive_on)
        delta_e = expectation_energy(rho_next, hamiltonian_end) - expectation_energy(self._rho, hamiltonian_start)

        reward = delta_e / dt if action.d.is_thermal else 0.0
        info = {
            "heat_into_system_h": delta_e if action.d is ProcessKind.HOT else 0.0,
            "heat_into_system_c": delta_e if action.d is ProcessKind.COLD else 0.0,
            "work_out": -delta_e if action.d is ProcessKind.WORK else 0.0,
            "quench_work_out": -quench,
            "delta_E": delta_e,
            "process": action.d.value,
        }

        self._rho = rho_next
        self._hamiltonian_end = hamiltonian_end
        self._u_prev = action.u
        self._d_prev = action.d
        self._steps += 1
        return self._observation(), float(reward), False, False, info


def _check_discount(gamma: float) -> None:
    if not 0.0 <= gamma < 1.0:
        raise DiscountDomainError(f"gamma must lie in [0, 1), got {gamma}")


def discounted_average(values: Sequence[float], gamma: float) -> np.ndarray:
    """
    Running discounted average <P>_i = gamma <P>_{i-1} + (1 - gamma) v_i with
    <P>_{-1} = 0.
    """
    _check_discount(gamma)
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return np.zeros(0)
    return lfilter([1.0 - gamma], [1.0, -gamma], values)


def future_discounted_average(values: Sequence[float], gamma: float) -> np.ndarray:
    """
    Forward-looking average (1 - gamma) sum_k gamma^k v_{i+1+k}, truncated at
    the end of the sequence (the last entry is 0).
    """
    _check_discount(gamma)
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return np.zeros(0)
    from_here = lfilter([1.0 - gamma], [1.0, -gamma], values[::-1])[::-1]
    return np.append(from_here[1:], 0.0)


def discount_to_rate(gamma: float, dt: float) -> float:
    """Continuous-time discount rate -ln(gamma) / dt"""
    if not 0.0 < gamma < 1.0:
        raise DiscountDomainError(f"gamma must lie in (0, 1) for a finite rate, got {gamma}")
    return -float(np.log(gamma)) / dt


def rate_to_discount(rate: float, dt: float) -> float:
    """Inverse of discount_to_rate"""
    if rate <= 0:
        raise DiscountDomainError(f"rate must be positive, got {rate}")
    return float(np.exp(-rate * dt))


class Controller(Protocol):
    """Chooses the next action from the current observation"""

    def reset(self) -> None:
        ...

    def act(self, obs: np.ndarray, step: int) -> Union[Action, ScheduledAction]:
        ...


class ScheduleController:
    """Replays a schedule cyclically, ignoring observations"""

    def __init__(self, schedule: CycleSchedule):
        self.schedule = schedule
        self._actions = schedule.actions()

    def reset(self) -> None:
        pass

    def act(self, obs: np.ndarray, step: int) -> ScheduledAction:
        return self._actions[step % len(self._actions)]


@dataclass
class Rollout:
    """Records of a rollout and the running discounted average power"""
    records: List[StepRecord]
    avg_power: np.ndarray
    gamma: float

    @property
    def rewards(self) -> np.ndarray:
        return np.array([record.reward for record in self.records], dtype=float)

    @property
    def final_power(self) -> float:
        return float(self.avg_power[-1]) if len(self.avg_power) else 0.0

    def to_frame(self) -> pd.DataFrame:
        """Trajectory table with the fixed export column order"""
        rows = []
        for record, power in zip(self.records, self.avg_power):
            encoding = record.next_obs[RHO_SLICE]
            rows.append({
                "step": record.step,
                "d": record.process.value,
                "u": record.action.u,
                "reward": record.reward,
                "p0": encoding[0],
                "p1": encoding[1],
                "p2": encoding[2],
                "re_rho12": encoding[7],
                "im_rho12": encoding[8],
                "avg_power": float(power),
            })
        return pd.DataFrame(rows, columns=TRAJECTORY_COLUMNS)


def run_schedule(
    schedule: Union[CycleSchedule, Controller],
    n_steps: int,
    gamma: float,
    spec: Optional[EngineSpec] = None,
) -> Rollout:
    """
    Reset a fresh environment and apply a schedule (or controller) for n_steps.

    Raises:
        RolloutError: Propagation failed; carries the step index
    """
    _check_discount(gamma)
    if n_steps < 0:
        raise ValueError(f"n_steps must be non-negative, got {n_steps}")
    env = QuantumHeatEngineEnv(spec)
    if isinstance(schedule, CycleSchedule):
        schedule.check_bounds(env.spec.u_min, env.spec.u_max)
        controller: Controller = ScheduleController(schedule)
    else:
        controller = schedule
    controller.reset()

    obs, _ = env.reset()
    records: List[StepRecord] = []
    for index in range(n_steps):
        action = as_action(controller.act(obs, index), env.spec)
        try:
            next_obs, reward, _, _, info = env.step(action)
        except QdynError as e:
            logger.error(f"Propagation failed at step {index}: {e}")
            raise RolloutError(index, e) from e
        records.append(StepRecord(
            step=index + 1,
            obs=obs,
            action=action,
            reward=reward,
            next_obs=next_obs,
            delta_E=info["delta_E"],
            process=action.d,
            info=info,
        ))
        obs = next_obs

    rewards = [record.reward for record in records]
    return Rollout(records=records, avg_power=discounted_average(rewards, gamma), gamma=gamma)
