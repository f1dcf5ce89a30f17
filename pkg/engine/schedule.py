"""
Scripted cycle schedules.

A schedule is an ordered list of segments; each segment expands into
(process, u) actions. Replaying a schedule applies its actions cyclically.
"""

from typing import Annotated, Iterable, List, Literal, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from analysis.fit import boltzmann_eval
from engine.qdyn import ProcessKind


class ScheduleError(Exception):
    """Raised when a schedule is empty or leaves the allowed u range"""
    pass


class ScheduledAction(BaseModel):
    """One (process, u) pair of a schedule"""
    model_config = ConfigDict(frozen=True)

    d: ProcessKind
    u: float


class ConstantSegment(BaseModel):
    """n_steps strokes of one process at a fixed u"""
    kind: Literal["constant-segment"] = "constant-segment"
    d: ProcessKind
    u: float
    n_steps: int = Field(1, ge=1)

    def expand(self) -> List[ScheduledAction]:
        return [ScheduledAction(d=self.d, u=self.u) for _ in range(self.n_steps)]


class LinearRampSegment(BaseModel):
    """
    n_steps strokes with u interpolated linearly between two end values.

    The end values belong to the neighbouring strokes, so they are excluded:
    a one-step ramp from 0.3 to 1.5 sits at 0.9.
    """
    kind: Literal["linear-ramp"] = "linear-ramp"
    d: ProcessKind = ProcessKind.WORK
    u_start: float
    u_end: float
    n_steps: int = Field(1, ge=1)

    def expand(self) -> List[ScheduledAction]:
        values = np.linspace(self.u_start, self.u_end, self.n_steps + 2)[1:-1]
        return [ScheduledAction(d=self.d, u=float(u)) for u in values]


class BoltzmannSegment(BaseModel):
    """Strokes whose u follows a Boltzmann sigmoid sampled at the given times"""
    kind: Literal["boltzmann-segment"] = "boltzmann-segment"
    d: ProcessKind = ProcessKind.WORK
    A1: float
    A2: float
    t0: float
    width: float = Field(..., gt=0.0, description="Sigmoid width dt in units of the control interval")
    times: List[float] = Field(..., min_length=1)

    def expand(self) -> List[ScheduledAction]:
        values = boltzmann_eval(self.A1, self.A2, self.t0, self.width, np.asarray(self.times, dtype=float))
        return [ScheduledAction(d=self.d, u=float(u)) for u in np.atleast_1d(values)]


Segment = Annotated[
    Union[ConstantSegment, LinearRampSegment, BoltzmannSegment],
    Field(discriminator="kind"),
]


class CycleSchedule(BaseModel):
    """A cyclic sequence of strokes built from segments"""
    tag: str
    segments: List[Segment] = Field(..., min_length=1)

    @field_validator("segments")
    @classmethod
    def validate_segments(cls, v: List[Segment]) -> List[Segment]:
        """Every segment must produce at least one action"""
        for segment in v:
            if not segment.expand():
                raise ValueError(f"segment {segment.kind} expands to no actions")
        return v

    def actions(self) -> List[ScheduledAction]:
        out: List[ScheduledAction] = []
        for segment in self.segments:
            out.extend(segment.expand())
        return out

    @property
    def period(self) -> int:
        return len(self.actions())

    def check_bounds(self, u_min: float, u_max: float) -> None:
        """Raise ScheduleError when any generated u leaves [u_min, u_max]"""
        for index, action in enumerate(self.actions()):
            if not u_min <= action.u <= u_max:
                raise ScheduleError(
                    f"schedule {self.tag!r} step {index} has u = {action.u} outside [{u_min}, {u_max}]"
                )

    @classmethod
    def from_actions(cls, tag: str, pairs: Iterable[Tuple[ProcessKind, float]]) -> "CycleSchedule":
        """Schedule of one-step constant segments from explicit (d, u) pairs"""
        segments = [ConstantSegment(d=ProcessKind(d), u=float(u)) for d, u in pairs]
        if not segments:
            raise ScheduleError(f"schedule {tag!r} has no actions")
        return cls(tag=tag, segments=segments)


def constant_schedule(tag: str, strokes: Sequence[Tuple[ProcessKind, float, int]]) -> CycleSchedule:
    """Schedule from (process, u, n_steps) triples"""
    return CycleSchedule(
        tag=tag,
        segments=[ConstantSegment(d=d, u=u, n_steps=n) for d, u, n in strokes],
    )
