"""
Boltzmann-sigmoid fitting of work-stroke profiles.

Detects the period of a replayed cycle, cuts one period into constant-process
segments and fits u(t) = (A1 - A2) / (1 + e^{(t - t0)/dt}) + A2 to the work
segments with a multi-start Levenberg-Marquardt least-squares search.
"""

from typing import Any, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, field_validator
from scipy.optimize import least_squares
from scipy.special import expit

from engine.qdyn import ProcessKind
from shared.config import get_logger

logger = get_logger(__name__)

MIN_POINTS = 4
ASYMPTOTE_MIN = 0.25
ASYMPTOTE_MAX = 1.55
SOLVER_TOLERANCE = 1e-14
MAX_EVALUATIONS = 4000
DEFAULT_SCAN_WINDOW = 200
DEFAULT_DECIMALS = 3
MIN_REPEATS = 2

WORKING_1 = "working-1"
WORKING_2 = "working-2"
WORKING = "working"
HEATING = "heating"
COOLING = "cooling"


class FitDomainError(Exception):
    """Raised for invalid sigmoid parameters or fit inputs"""
    pass


class FitUnderdeterminedError(Exception):
    """Raised when fewer points than free parameters are supplied"""
    pass


class FitConvergenceError(Exception):
    """Raised when no start converges; carries the best iterate found"""

    def __init__(self, message: str, best: Optional["FitResult"] = None):
        self.best = best
        super().__init__(message)


class NoPeriodError(Exception):
    """Raised when a trajectory shows no exact repetition in the scanned window"""
    pass


class NoWorkSegmentError(Exception):
    """Raised when a periodic trajectory contains no work segment"""
    pass


def boltzmann_eval(A1: float, A2: float, t0: float, dt: float, t: Any) -> Any:
    """
    Evaluate (A1 - A2) / (1 + e^{(t - t0)/dt}) + A2.

    Works on scalars and arrays; infinite t gives the asymptotes.
    """
    if dt == 0:
        raise FitDomainError("sigmoid width dt must be non-zero")
    z = (np.asarray(t, dtype=float) - t0) / dt
    value = (A1 - A2) * expit(-z) + A2
    if np.ndim(value) == 0:
        return float(value)
    return value


def boltzmann_jacobian(params: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Derivatives of the sigmoid with respect to (A1, A2, t0, dt)"""
    A1, A2, t0, dt = params
    z = (t - t0) / dt
    s = expit(-z)
    slope = (A1 - A2) * s * (1.0 - s) / dt
    return np.column_stack([s, 1.0 - s, slope, slope * z])


class FitResult(BaseModel):
    """Sigmoid parameters of one work segment and the goodness of fit"""
    segment: str = Field(WORKING, description="working-1, working-2 or working")
    A1: float
    A2: float
    t0: float = Field(..., description="Midpoint time in units of the control interval")
    dt: float = Field(..., gt=0.0, description="Width in units of the control interval")
    r_squared: Optional[float] = Field(None, description="Coefficient of determination; None when not validated")
    t_range: Tuple[float, float]
    n_points: int
    method: str = Field("least-squares", description="least-squares, constant or template")
    start_r_squared: List[float] = Field(default_factory=list)

    @field_validator("r_squared")
    @classmethod
    def validate_r_squared(cls, v: Optional[float]) -> Optional[float]:
        """R² never exceeds one"""
        if v is not None and v > 1.0 + 1e-12:
            raise ValueError(f"R² = {v} exceeds 1")
        return v

    def evaluate(self, t: Any) -> Any:
        return boltzmann_eval(self.A1, self.A2, self.t0, self.dt, t)


def _r_squared(u: np.ndarray, fitted: np.ndarray) -> float:
    ss_tot = float(np.sum((u - u.mean()) ** 2))
    ss_res = float(np.sum((u - fitted) ** 2))
    if ss_tot == 0.0:
        return 1.0 if ss_res == 0.0 else 0.0
    return 1.0 - ss_res / ss_tot


def _canonical(params: np.ndarray) -> np.ndarray:
    """Absorb a negative width into an A1 <-> A2 swap"""
    A1, A2, t0, dt = params
    if dt < 0:
        return np.array([A2, A1, t0, -dt])
    return np.array([A1, A2, t0, dt])


def _initial_guesses(t: np.ndarray, u: np.ndarray) -> List[np.ndarray]:
    span = float(t[-1] - t[0])
    slopes = np.abs(np.diff(u) / np.diff(t))
    steepest = int(np.argmax(slopes))
    t_mid = 0.5 * (t[steepest] + t[steepest + 1])
    width = span / 10.0
    return [
        np.array([u[0], u[-1], t_mid, width]),
        np.array([u[-1], u[0], t_mid, width]),
    ]


def _check_points(points: Sequence[Tuple[float, float]]) -> Tuple[np.ndarray, np.ndarray]:
    arr = np.asarray(points, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise FitDomainError(f"points must be (t, u) pairs, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise FitDomainError("points contain non-finite values")
    order = np.argsort(arr[:, 0], kind="stable")
    t, u = arr[order, 0], arr[order, 1]
    if np.any(np.diff(t) == 0):
        raise FitDomainError("t values must be distinct")
    return t, u


def fit_boltzmann(points: Sequence[Tuple[float, float]], segment: str = WORKING) -> FitResult:
    """
    Least-squares Boltzmann fit with multiple starts.

    Starts take A1/A2 from the end values in both orders, t0 from the
    steepest-slope interval and dt from a tenth of the time span. The best
    residual wins. Constant data returns A1 = A2 = c with R² = 1.

    Raises:
        FitUnderdeterminedError: Fewer than four points
        FitDomainError: Repeated t values or non-finite input
        FitConvergenceError: No start reached a converged iterate
    """
    if len(points) < MIN_POINTS:
        raise FitUnderdeterminedError(
            f"{len(points)} points cannot determine {MIN_POINTS} sigmoid parameters"
        )
    t, u = _check_points(points)
    t_range = (float(t[0]), float(t[-1]))
    span = t_range[1] - t_range[0]

    if float(np.sum((u - u.mean()) ** 2)) == 0.0:
        value = float(u[0])
        return FitResult(
            segment=segment, A1=value, A2=value, t0=float(t.mean()), dt=span / 10.0,
            r_squared=1.0, t_range=t_range, n_points=len(t), method="constant",
        )

    def residuals(params: np.ndarray) -> np.ndarray:
        return boltzmann_eval(params[0], params[1], params[2], params[3], t) - u

    def jacobian(params: np.ndarray) -> np.ndarray:
        return boltzmann_jacobian(params, t)

    candidates = []
    for start in _initial_guesses(t, u):
        try:
            result = least_squares(
                residuals, start, jac=jacobian, method="lm",
                ftol=SOLVER_TOLERANCE, xtol=SOLVER_TOLERANCE, gtol=SOLVER_TOLERANCE,
                max_nfev=MAX_EVALUATIONS,
            )
        except (ValueError, FitDomainError, np.linalg.LinAlgError) as e:
            logger.debug(f"Fit start {start} failed: {e}")
            continue
        params = _canonical(result.x)
        if not np.all(np.isfinite(params)) or params[3] == 0.0:
            continue
        fitted = boltzmann_eval(params[0], params[1], params[2], params[3], t)
        candidates.append((float(np.sum((fitted - u) ** 2)), params, result.status, _r_squared(u, fitted)))

    if not candidates:
        raise FitConvergenceError(f"no fit start converged for segment {segment}")

    ss_res, params, status, r_squared = min(candidates, key=lambda c: c[0])
    best = FitResult(
        segment=segment,
        A1=float(params[0]), A2=float(params[1]), t0=float(params[2]), dt=float(params[3]),
        r_squared=r_squared, t_range=t_range, n_points=len(t),
        start_r_squared=[c[3] for c in candidates],
    )
    if status <= 0:
        raise FitConvergenceError(
            f"fit of segment {segment} stopped without converging (status {status})", best=best,
        )
    if not (ASYMPTOTE_MIN <= best.A1 <= ASYMPTOTE_MAX and ASYMPTOTE_MIN <= best.A2 <= ASYMPTOTE_MAX):
        raise FitConvergenceError(
            f"fitted asymptotes ({best.A1:.4g}, {best.A2:.4g}) outside "
            f"[{ASYMPTOTE_MIN}, {ASYMPTOTE_MAX}]",
            best=best,
        )
    logger.debug(f"Fitted {segment}: residual {ss_res:.3e}, R² {r_squared:.6f}")
    return best


class TrajectorySegment(BaseModel):
    """Contiguous strokes of one process inside one period"""
    tag: str
    process: ProcessKind
    points: List[Tuple[float, float]]

    @property
    def duration(self) -> int:
        return len(self.points)

    @property
    def times(self) -> List[float]:
        return [t for t, _ in self.points]


def _as_sequence(trajectory: Any) -> Tuple[List[ProcessKind], List[float], List[float]]:
    """Accept a trajectory table, a list of step records or (d, u) pairs"""
    if isinstance(trajectory, pd.DataFrame):
        kinds = [ProcessKind(d) for d in trajectory["d"]]
        scales = [float(u) for u in trajectory["u"]]
        if "step" in trajectory.columns:
            times = [float(s) for s in trajectory["step"]]
        else:
            times = [float(k + 1) for k in range(len(kinds))]
        return kinds, scales, times
    kinds, scales, times = [], [], []
    for index, item in enumerate(trajectory):
        if hasattr(item, "action"):
            kinds.append(ProcessKind(item.action.d))
            scales.append(float(item.action.u))
            times.append(float(getattr(item, "step", index + 1)))
        else:
            d, u = item
            kinds.append(ProcessKind(d))
            scales.append(float(u))
            times.append(float(index + 1))
    return kinds, scales, times


def detect_period(
    kinds: Sequence[ProcessKind],
    scales: Sequence[float],
    window: int = DEFAULT_SCAN_WINDOW,
    decimals: int = DEFAULT_DECIMALS,
) -> int:
    """
    Smallest period p such that the last `window` strokes repeat exactly
    with period p (process and u rounded to `decimals`), seen at least twice.

    Raises:
        NoPeriodError: No such period
    """
    keys = [(kind, round(float(u), decimals)) for kind, u in zip(kinds, scales)]
    tail = keys[-window:]
    for period in range(1, len(tail) // MIN_REPEATS + 1):
        if all(tail[i] == tail[i - period] for i in range(period, len(tail))):
            return period
    raise NoPeriodError(f"no repeating pattern within the last {len(tail)} steps")


def _label_runs(runs: List[List[int]], kinds: List[ProcessKind]) -> List[str]:
    labels = []
    count = len(runs)
    for index, run in enumerate(runs):
        kind = kinds[run[0]]
        if kind is ProcessKind.HOT:
            labels.append(HEATING)
        elif kind is ProcessKind.COLD:
            labels.append(COOLING)
        else:
            before = kinds[runs[(index - 1) % count][0]] if count > 1 else None
            after = kinds[runs[(index + 1) % count][0]] if count > 1 else None
            if before is ProcessKind.COLD and after is ProcessKind.HOT:
                labels.append(WORKING_1)
            elif before is ProcessKind.HOT and after is ProcessKind.COLD:
                labels.append(WORKING_2)
            else:
                labels.append(WORKING)
    return labels


def segment_trajectory(
    trajectory: Any,
    window: int = DEFAULT_SCAN_WINDOW,
    decimals: int = DEFAULT_DECIMALS,
) -> List[TrajectorySegment]:
    """
    Cut the last full period of a trajectory into constant-process segments.

    The period is aligned to start at a process change so no segment wraps.
    Work segments between Cold and Hot are labeled working-1, between Hot and
    Cold working-2.
    """
    kinds, scales, times = _as_sequence(trajectory)
    if not kinds:
        raise NoPeriodError("empty trajectory")
    period = detect_period(kinds, scales, window=window, decimals=decimals)
    n = len(kinds)

    start = n - period
    for candidate in range(n - period, max(n - 2 * period, 0), -1):
        if kinds[candidate] != kinds[candidate - 1]:
            start = candidate
            break
    indices = list(range(start, start + period))

    runs: List[List[int]] = []
    for index in indices:
        if runs and kinds[runs[-1][-1]] == kinds[index]:
            runs[-1].append(index)
        else:
            runs.append([index])

    labels = _label_runs(runs, kinds)
    return [
        TrajectorySegment(
            tag=label,
            process=kinds[run[0]],
            points=[(times[i], scales[i]) for i in run],
        )
        for label, run in zip(labels, runs)
    ]


def _neighbour_scale(segments: List[TrajectorySegment], index: int, offset: int) -> float:
    neighbour = segments[(index + offset) % len(segments)]
    return neighbour.points[-1][1] if offset < 0 else neighbour.points[0][1]


def template_fit(
    segment: TrajectorySegment,
    u_before: float,
    u_after: float,
    width: float,
) -> FitResult:
    """
    General working-process sigmoid for segments too short to fit: asymptotes
    from the neighbouring thermal strokes, midpoint of [t_first - 1, t_last + 0.5].
    """
    times = segment.times
    t_range = (times[0] - 1.0, times[-1] + 0.5)
    t0 = 0.5 * (t_range[0] + t_range[1])
    return FitResult(
        segment=segment.tag, A1=u_before, A2=u_after, t0=t0, dt=width,
        r_squared=None, t_range=t_range, n_points=len(times), method="template",
    )


def fit_segments(
    segments: List[TrajectorySegment],
    working_1_width: float = 0.05,
    working_2_width: float = 0.25,
) -> List[FitResult]:
    """
    Fit every work segment; short ones get the template parameters.

    Raises:
        NoWorkSegmentError: The period contains no work stroke
    """
    results = []
    for index, segment in enumerate(segments):
        if segment.process is not ProcessKind.WORK:
            continue
        if segment.duration >= MIN_POINTS:
            results.append(fit_boltzmann(segment.points, segment=segment.tag))
            continue
        width = working_1_width if segment.tag == WORKING_1 else working_2_width
        results.append(template_fit(
            segment,
            u_before=_neighbour_scale(segments, index, -1),
            u_after=_neighbour_scale(segments, index, +1),
            width=width,
        ))
    if not results:
        raise NoWorkSegmentError("periodic pattern contains no work segment")
    return results


class FittedCycle(BaseModel):
    """Otto-like decomposition: working-1, heating, working-2, cooling"""
    durations: Tuple[int, int, int, int] = Field(..., description="tau1..tau4 in control intervals")
    heating_u: float
    cooling_u: float
    working_1: FitResult
    working_2: FitResult

    @field_validator("durations")
    @classmethod
    def validate_durations(cls, v: Tuple[int, int, int, int]) -> Tuple[int, int, int, int]:
        """Every stroke lasts at least one control interval"""
        if any(tau <= 0 for tau in v):
            raise ValueError(f"durations must be positive, got {v}")
        return v

    @property
    def period(self) -> int:
        return sum(self.durations)


def build_fitted_cycle(segments: List[TrajectorySegment], fits: List[FitResult]) -> Optional[FittedCycle]:
    """Assemble a FittedCycle when the period has exactly the four Otto-like strokes"""
    tags = [segment.tag for segment in segments]
    if sorted(tags) != sorted([WORKING_1, HEATING, WORKING_2, COOLING]):
        return None
    by_tag = {segment.tag: segment for segment in segments}
    fit_by_tag = {fit.segment: fit for fit in fits}
    return FittedCycle(
        durations=(
            by_tag[WORKING_1].duration,
            by_tag[HEATING].duration,
            by_tag[WORKING_2].duration,
            by_tag[COOLING].duration,
        ),
        heating_u=by_tag[HEATING].points[0][1],
        cooling_u=by_tag[COOLING].points[0][1],
        working_1=fit_by_tag[WORKING_1],
        working_2=fit_by_tag[WORKING_2],
    )


def fit_report_frame(fits: List[FitResult]) -> pd.DataFrame:
    """Table with the columns process, t-range, A1, A2, t0, dt, R²"""
    return pd.DataFrame([
        {
            "process": fit.segment,
            "t_range": f"[{fit.t_range[0]:g}, {fit.t_range[1]:g}]",
            "A1": fit.A1,
            "A2": fit.A2,
            "t0": fit.t0,
            "dt": fit.dt,
            "R2": fit.r_squared,
            "method": fit.method,
        }
        for fit in fits
    ])
