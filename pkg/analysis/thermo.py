"""
Thermodynamic scoring of engine trajectories.

Entropy production and efficiency use the same discounted estimator as the
average power, so their ratio is consistent. Heat J is the energy flowing
into the system during a thermal stroke; with this sign convention the
efficiency formula reduces to W / Q_h at a periodic state.
"""

from enum import Enum
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from engine.environment import Rollout, StepRecord, discounted_average, run_schedule
from engine.qdyn import EngineSpec, ProcessKind
from engine.schedule import ConstantSegment, CycleSchedule, LinearRampSegment
from shared.config import get_logger
from shared.settings import BaselineSettings

logger = get_logger(__name__)

STEADY_REFERENCE_POWER = 0.399
STEADY_REFERENCE_SOURCE = "external constant: steady limit under simultaneous bath coupling"


class UndefinedEfficiencyError(Exception):
    """Raised when efficiency is requested for non-positive average power"""
    pass


class UnknownCycleError(Exception):
    """Raised for an unknown baseline cycle tag"""
    pass


class EfficiencyReport(BaseModel):
    """Average power, entropy production and efficiencies of a rollout"""
    avg_power: float
    avg_entropy_production: float
    eta: float
    eta_carnot: float
    eta_CA: float

    @property
    def within_carnot_bound(self) -> bool:
        return self.eta <= self.eta_carnot + 1e-9


def step_entropy_production(records: Sequence[StepRecord], spec: EngineSpec) -> np.ndarray:
    """Per-step sigma_i = -beta_active * dE/dt, zero for Work strokes"""
    betas = {ProcessKind.HOT: spec.beta_h, ProcessKind.COLD: spec.beta_c, ProcessKind.WORK: 0.0}
    return np.array(
        [-betas[record.process] * record.delta_E / spec.dt for record in records],
        dtype=float,
    )


def entropy_production_trace(
    records: Sequence[StepRecord],
    gamma: float,
    spec: Optional[EngineSpec] = None,
) -> np.ndarray:
    """Running discounted average of the entropy production"""
    spec = spec or EngineSpec()
    return discounted_average(step_entropy_production(records, spec), gamma)


def efficiency(avg_power: float, avg_sigma: float, beta_c: float, beta_h: float) -> EfficiencyReport:
    """
    eta = eta_c / (1 + <sigma> / (beta_c <P>)).

    Raises:
        UndefinedEfficiencyError: avg_power is not positive
    """
    if not np.isfinite(avg_power) or avg_power <= 0.0:
        raise UndefinedEfficiencyError(f"efficiency undefined for average power {avg_power}")
    eta_carnot = 1.0 - beta_h / beta_c
    return EfficiencyReport(
        avg_power=avg_power,
        avg_entropy_production=avg_sigma,
        eta=eta_carnot / (1.0 + avg_sigma / (beta_c * avg_power)),
        eta_carnot=eta_carnot,
        eta_CA=1.0 - float(np.sqrt(beta_h / beta_c)),
    )


class SteadyComparison(BaseModel):
    """Average power relative to the steady-coupling reference"""
    avg_power: float
    reference: float
    ratio: float
    source: str = STEADY_REFERENCE_SOURCE


def compare_to_steady(avg_power: float, reference: float = STEADY_REFERENCE_POWER) -> SteadyComparison:
    return SteadyComparison(avg_power=avg_power, reference=reference, ratio=avg_power / reference)


class PeriodBalance(BaseModel):
    """Energy bookkeeping over the last full period of a trajectory"""
    period: int
    heat_hot: float = Field(..., description="Heat into the system from the hot bath")
    heat_cold: float = Field(..., description="Heat into the system from the cold bath")
    work_out: float = Field(..., description="Drive and quench work done by the system")
    energy_residual: float = Field(..., description="Net internal-energy change over the period")
    mean_power: float
    mean_entropy_production: float
    direct_efficiency: Optional[float] = None


def period_balance(records: Sequence[StepRecord], period: int, spec: Optional[EngineSpec] = None) -> PeriodBalance:
    """
    Heat and work over the last `period` records.

    At a periodic state the residual vanishes, mean entropy production is
    non-negative and direct_efficiency = work_out / heat_hot.
    """
    spec = spec or EngineSpec()
    if period <= 0 or period > len(records):
        raise ValueError(f"period {period} invalid for {len(records)} records")
    window = records[-period:]
    heat_hot = sum(record.info["heat_into_system_h"] for record in window)
    heat_cold = sum(record.info["heat_into_system_c"] for record in window)
    work_out = sum(record.info["work_out"] + record.info["quench_work_out"] for record in window)
    duration = period * spec.dt
    direct = work_out / heat_hot if heat_hot > 0.0 and work_out > 0.0 else None
    return PeriodBalance(
        period=period,
        heat_hot=heat_hot,
        heat_cold=heat_cold,
        work_out=work_out,
        energy_residual=heat_hot + heat_cold - work_out,
        mean_power=(heat_hot + heat_cold) / duration,
        mean_entropy_production=-(spec.beta_h * heat_hot + spec.beta_c * heat_cold) / duration,
        direct_efficiency=direct,
    )


class BaselineTag(str, Enum):
    """Comparison cycles"""
    CYCLE1 = "cycle1"
    CYCLE2 = "cycle2"
    CYCLE3_RL = "cycle3"
    FITTED_OTTO = "fitted"


class BaselineCycle(BaseModel):
    """A tagged comparison cycle and its schedule"""
    tag: BaselineTag
    schedule: CycleSchedule


def build_baseline_cycle(tag: str, settings: Optional[BaselineSettings] = None) -> BaselineCycle:
    """
    Schedules of the comparison cycles.

    All of them share one Hot and one Cold stroke. Cycle 3 and the fitted
    Otto-like cycle use the two Boltzmann work segments; Cycles 1 and 2 ramp u
    linearly, Cycle 2 with a longer expansion.

    Raises:
        UnknownCycleError: tag is not one of cycle1, cycle2, cycle3, fitted
    """
    settings = settings or BaselineSettings()
    try:
        tag = BaselineTag(str(tag).lower())
    except ValueError as e:
        known = ", ".join(t.value for t in BaselineTag)
        raise UnknownCycleError(f"unknown cycle {tag!r} (known: {known})") from e

    hot = ConstantSegment(d=ProcessKind.HOT, u=settings.hot_u)
    cold = ConstantSegment(d=ProcessKind.COLD, u=settings.cold_u)

    if tag in (BaselineTag.CYCLE3_RL, BaselineTag.FITTED_OTTO):
        segments = [settings.fitted_working_1, hot, settings.fitted_working_2, cold]
    else:
        if tag is BaselineTag.CYCLE1:
            n_up, n_down = settings.cycle1_ramp_up, settings.cycle1_ramp_down
        else:
            n_up, n_down = settings.cycle2_ramp_up, settings.cycle2_ramp_down
        segments = [
            LinearRampSegment(u_start=settings.ramp_low, u_end=settings.ramp_high, n_steps=n_up),
            hot,
            LinearRampSegment(u_start=settings.ramp_high, u_end=settings.ramp_low, n_steps=n_down),
            cold,
        ]
    return BaselineCycle(tag=tag, schedule=CycleSchedule(tag=tag.value, segments=segments))


def evaluate_rollout(rollout: Rollout, spec: Optional[EngineSpec] = None) -> EfficiencyReport:
    """
    Efficiency report from the final discounted averages of a rollout.

    Raises:
        UndefinedEfficiencyError: Empty rollout or non-positive power
    """
    spec = spec or EngineSpec()
    if not rollout.records:
        raise UndefinedEfficiencyError("efficiency undefined for an empty trajectory")
    sigma = entropy_production_trace(rollout.records, rollout.gamma, spec)
    return efficiency(rollout.final_power, float(sigma[-1]), spec.beta_c, spec.beta_h)


def build_report(
    rollout: Rollout,
    spec: Optional[EngineSpec] = None,
    steady_reference: float = STEADY_REFERENCE_POWER,
) -> Dict[str, Any]:
    """
    Flat key-value report: power, sigma, eta, eta_c, eta_CA, ratio_vs_steady.

    When the efficiency is undefined the eta field is None and status says why.
    """
    spec = spec or EngineSpec()
    power = rollout.final_power
    sigma_trace = entropy_production_trace(rollout.records, rollout.gamma, spec)
    report: Dict[str, Any] = {
        "steps": len(rollout.records),
        "gamma": rollout.gamma,
        "power": power,
        "sigma": float(sigma_trace[-1]) if len(sigma_trace) else 0.0,
        "eta": None,
        "eta_c": spec.eta_carnot,
        "eta_CA": spec.eta_curzon_ahlborn,
        "ratio_vs_steady": compare_to_steady(power, steady_reference).ratio,
        "status": "ok",
    }
    try:
        report["eta"] = evaluate_rollout(rollout, spec).eta
    except UndefinedEfficiencyError as e:
        logger.warning(f"Efficiency not reported: {e}")
        report["status"] = "undefined-efficiency"
    return report


def compare_cycles(
    tags: Sequence[str],
    n_steps: int,
    gamma: float,
    spec: Optional[EngineSpec] = None,
    settings: Optional[BaselineSettings] = None,
) -> pd.DataFrame:
    """
    Replay several baseline cycles and tabulate their final average power.

    The relative_to_cycle2 column is the power gain over Cycle 2 in percent
    (None when Cycle 2 is absent or its power is not positive).
    """
    rows: List[Dict[str, Any]] = []
    for tag in tags:
        cycle = build_baseline_cycle(tag, settings)
        rollout = run_schedule(cycle.schedule, n_steps, gamma, spec)
        rows.append({
            "cycle": cycle.tag.value,
            "period": cycle.schedule.period,
            "final_power": rollout.final_power,
        })
        logger.info(f"{cycle.tag.value}: final <P> = {rollout.final_power:.6f}")
    frame = pd.DataFrame(rows, columns=["cycle", "period", "final_power"])
    reference = frame.loc[frame["cycle"] == BaselineTag.CYCLE2.value, "final_power"]
    if len(reference) and reference.iloc[0] > 0:
        frame["relative_to_cycle2"] = 100.0 * (frame["final_power"] / reference.iloc[0] - 1.0)
    else:
        frame["relative_to_cycle2"] = None
    return frame
