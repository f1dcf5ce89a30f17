"""
Open-system dynamics of the three-level engine.

Builds the stroke Hamiltonians, resolves the bath coupling operators onto the
energy gaps of the instantaneous Hamiltonian, assembles the GKLS generator as a
9x9 superoperator (row-major vectorization) and propagates density matrices
over one control interval with a fixed-step fourth-order Runge-Kutta scheme.

Vectorization convention: vec(A rho B) = (A kron B^T) vec(rho).
"""

from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Callable, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import linalg

from shared.config import get_logger

logger = get_logger(__name__)

DIM = 3
GAP_TOLERANCE = 1e-9
HERMITIAN_TOLERANCE = 1e-12
TRACE_TOLERANCE = 1e-9
NEGATIVITY_TOLERANCE = 1e-9
DRIFT_CORRECTION_THRESHOLD = 1e-12
DRIFT_ERROR_THRESHOLD = 1e-9
MAX_SUBSTEP = 0.01
BOUND_SLACK = 1e-9
STEADY_STATE_RCOND = 1e-10
STEADY_STATE_RESIDUAL = 1e-10

UPPER_PAIRS = ((0, 1), (0, 2), (1, 2))
_IDENTITY = np.eye(DIM, dtype=complex)


class QdynError(Exception):
    """Base class for dynamics errors"""
    pass


class QdynDomainError(QdynError):
    """Raised when an input lies outside the domain of an operation"""
    pass


class DriveFrequencyError(QdynError):
    """Raised when the coupled-block gap vanishes and the drive frequency is singular"""
    pass


class IntegrationAccuracyError(QdynError):
    """Raised when a propagated state drifts beyond tolerance; reduce the substep"""
    pass


class DegenerateSteadyStateError(QdynError):
    """Raised when a generator does not have a one-dimensional kernel"""
    pass


class ProcessKind(str, Enum):
    """Stroke selector; the discrete action index follows declaration order"""
    HOT = "hot"
    COLD = "cold"
    WORK = "work"

    @property
    def action_index(self) -> int:
        return PROCESS_ORDER.index(self)

    @classmethod
    def from_index(cls, index: int) -> "ProcessKind":
        if not 0 <= int(index) < len(PROCESS_ORDER):
            raise QdynDomainError(f"Process index {index} not in 0..{len(PROCESS_ORDER) - 1}")
        return PROCESS_ORDER[int(index)]

    @property
    def is_thermal(self) -> bool:
        return self is not ProcessKind.WORK


PROCESS_ORDER = (ProcessKind.HOT, ProcessKind.COLD, ProcessKind.WORK)


class Reservoir(str, Enum):
    """Bath a jump operator couples to"""
    COLD = "cold"
    HOT = "hot"


def _ket_bra(row: int, col: int) -> np.ndarray:
    op = np.zeros((DIM, DIM), dtype=complex)
    op[row, col] = 1.0
    return op


# L_c = |0><1| couples the cold bath, L_h = |0><2| the hot bath
BARE_OPERATORS = {
    Reservoir.COLD: _ket_bra(0, 1),
    Reservoir.HOT: _ket_bra(0, 2),
}


class EngineSpec(BaseModel):
    """
    Physical parameters of the engine and its baths.

    Energies are in units of omega10, inverse temperatures in units of
    1/omega10. Defaults reproduce the reference configuration.
    """
    model_config = ConfigDict(frozen=True, extra="forbid")

    omega0: float = Field(0.0, description="Ground level eigenfrequency")
    omega1: float = Field(1.0, description="First excited level eigenfrequency")
    omega2: float = Field(2.5, description="Second excited level eigenfrequency")
    drive_strength: float = Field(0.5, ge=0.0, description="Drive intensity lambda")
    beta_c: float = Field(5.0, ge=0.0, description="Inverse temperature of the cold bath")
    beta_h: float = Field(1.0, ge=0.0, description="Inverse temperature of the hot bath")
    g1: float = Field(0.0, description="Coupling function g1 entering the drive frequency")
    g2: float = Field(0.0, description="Coupling function g2 entering the drive frequency")
    gamma_hot: float = Field(2.0, ge=0.0, description="Hot-bath rate on the 0-2 gap during Hot strokes")
    gamma_cold: float = Field(2.0, ge=0.0, description="Cold-bath rate on the 0-1 gap during Cold strokes")
    u_min: float = Field(0.3, gt=0.0, description="Lower limit of the control scale u")
    u_max: float = Field(1.5, gt=0.0, description="Upper limit of the control scale u")
    dt: float = Field(0.5, gt=0.0, description="Duration of one control interval")
    substeps: int = Field(50, ge=1, description="Runge-Kutta substeps per control interval")
    initial_beta: float = Field(3.0, ge=0.0, description="Inverse temperature of the initial Gibbs state")
    initial_u: float = Field(1.0, gt=0.0, description="Scale of the Hamiltonian the initial state is thermal in")

    @model_validator(mode="after")
    def check_consistency(self) -> "EngineSpec":
        """Level ordering, bound ordering and substep size"""
        if not self.omega0 < self.omega1 < self.omega2:
            raise ValueError("eigenfrequencies must satisfy omega0 < omega1 < omega2")
        if self.u_min >= self.u_max:
            raise ValueError(f"u_min ({self.u_min}) must be below u_max ({self.u_max})")
        if self.dt / self.substeps > MAX_SUBSTEP + 1e-15:
            raise ValueError(
                f"substep dt/substeps = {self.dt / self.substeps:g} exceeds {MAX_SUBSTEP}"
            )
        return self

    @property
    def free_hamiltonian(self) -> np.ndarray:
        return np.diag([self.omega0, self.omega1, self.omega2]).astype(complex)

    @property
    def substep(self) -> float:
        return self.dt / self.substeps

    @property
    def eta_carnot(self) -> float:
        return 1.0 - self.beta_h / self.beta_c

    @property
    def eta_curzon_ahlborn(self) -> float:
        return 1.0 - float(np.sqrt(self.beta_h / self.beta_c))


class ProcessParams(BaseModel):
    """Bath couplings and drive switch of one stroke type"""
    model_config = ConfigDict(frozen=True)

    kind: ProcessKind
    gamma_c_10: float = Field(0.0, ge=0.0, description="Cold-bath forward rate on the 0-1 gap")
    gamma_h_20: float = Field(0.0, ge=0.0, description="Hot-bath forward rate on the 0-2 gap")
    drive_on: bool = False
    beta_active: Optional[float] = Field(None, ge=0.0, description="Inverse temperature of the coupled bath")

    def rate_for(self, reservoir: Reservoir) -> float:
        return self.gamma_c_10 if reservoir is Reservoir.COLD else self.gamma_h_20


def process_params(kind: ProcessKind, spec: EngineSpec) -> ProcessParams:
    """Stroke parameters for a process kind under the given engine spec"""
    kind = ProcessKind(kind)
    if kind is ProcessKind.HOT:
        return ProcessParams(kind=kind, gamma_h_20=spec.gamma_hot, beta_active=spec.beta_h)
    if kind is ProcessKind.COLD:
        return ProcessParams(kind=kind, gamma_c_10=spec.gamma_cold, beta_active=spec.beta_c)
    return ProcessParams(kind=kind, drive_on=True)


@dataclass(frozen=True, eq=False)
class JumpChannel:
    """A jump operator resolved onto one positive energy gap"""
    epsilon: float
    operator: np.ndarray
    rate_forward: float
    rate_backward: float


def _as_matrix(matrix: np.ndarray, label: str) -> np.ndarray:
    arr = np.asarray(matrix, dtype=complex)
    if arr.shape != (DIM, DIM):
        raise QdynDomainError(f"{label} must be {DIM}x{DIM}, got shape {arr.shape}")
    return arr


def _check_hermitian(matrix: np.ndarray, label: str = "H") -> np.ndarray:
    arr = _as_matrix(matrix, label)
    deviation = float(np.max(np.abs(arr - arr.conj().T)))
    if deviation > HERMITIAN_TOLERANCE:
        raise QdynDomainError(f"{label} is not Hermitian (max deviation {deviation:.3e})")
    return arr


def _check_scale(spec: EngineSpec, u: float) -> None:
    if not (spec.u_min - BOUND_SLACK <= u <= spec.u_max + BOUND_SLACK):
        raise QdynDomainError(f"u = {u} outside [{spec.u_min}, {spec.u_max}]")


def validate_density_matrix(rho: np.ndarray) -> np.ndarray:
    """Check Hermiticity, unit trace and positivity; returns a complex copy"""
    arr = _check_hermitian(rho, "rho")
    trace = np.trace(arr)
    if abs(trace - 1.0) > TRACE_TOLERANCE:
        raise QdynDomainError(f"rho has trace {trace.real:.12g}")
    smallest = float(linalg.eigvalsh(arr)[0])
    if smallest < -NEGATIVITY_TOLERANCE:
        raise QdynDomainError(f"rho has negative eigenvalue {smallest:.3e}")
    return arr.copy()


def drive_frequency(spec: EngineSpec, u: float) -> float:
    """
    Drive frequency for a Work stroke at scale u.

    Uses the gap of the coupled {|1>, |2>} block of the Hamiltonian at stroke
    start (drive included) and the bare denominator omega2 - omega1.
    """
    block = np.array([
        [u * spec.omega1, spec.drive_strength],
        [spec.drive_strength, u * spec.omega2],
    ])
    eigenvalues = linalg.eigvalsh(block)
    epsilon_21 = float(eigenvalues[1] - eigenvalues[0])
    if epsilon_21 < 1e-12:
        raise DriveFrequencyError(f"coupled-block gap vanishes at u = {u}")
    coupling = 0.25 * (spec.g1 + spec.g2) ** 2
    return (epsilon_21 ** 2 + coupling) / (spec.omega2 - spec.omega1)


def _hamiltonian(spec: EngineSpec, u: float, tau: float, drive_on: bool) -> np.ndarray:
    hamiltonian = u * spec.free_hamiltonian
    if drive_on:
        phase = np.exp(1j * drive_frequency(spec, u) * tau)
        hamiltonian[1, 2] = spec.drive_strength * phase
        hamiltonian[2, 1] = spec.drive_strength * np.conj(phase)
    return hamiltonian


def build_hamiltonian(spec: EngineSpec, u: float, tau: float, drive_on: bool) -> np.ndarray:
    """
    Hamiltonian u * H_free + V(tau).

    The drive phase restarts at tau = 0 at the beginning of every stroke.
    """
    _check_scale(spec, u)
    if not (-BOUND_SLACK <= tau <= spec.dt + BOUND_SLACK):
        raise QdynDomainError(f"tau = {tau} outside [0, {spec.dt}]")
    return _hamiltonian(spec, u, tau, drive_on)


def projected_jump_operators(
    hamiltonian: np.ndarray,
    reservoir: Reservoir,
    process: ProcessParams,
) -> List[JumpChannel]:
    """
    Resolve the bare coupling operator of a reservoir onto the positive
    energy gaps of a Hamiltonian.

    Each channel carries the forward rate of the process and the detailed-balance
    backward rate e^{-beta * epsilon} times the forward rate, applied to the
    adjoint operator.
    """
    hamiltonian = _check_hermitian(hamiltonian)
    reservoir = Reservoir(reservoir)
    rate = process.rate_for(reservoir)
    if rate == 0.0:
        return []
    if process.beta_active is None:
        raise QdynDomainError(f"{process.kind.value} process has a bath rate but no inverse temperature")

    energies, vectors = linalg.eigh(hamiltonian)
    projectors = [np.outer(vectors[:, k], vectors[:, k].conj()) for k in range(DIM)]
    bare = BARE_OPERATORS[reservoir]

    groups: List[List[tuple]] = []
    gaps: List[float] = []
    for m in range(DIM):
        for n in range(DIM):
            gap = float(energies[m] - energies[n])
            if gap <= GAP_TOLERANCE:
                continue
            for index, known in enumerate(gaps):
                if abs(gap - known) <= GAP_TOLERANCE:
                    groups[index].append((m, n))
                    break
            else:
                gaps.append(gap)
                groups.append([(m, n)])

    channels = []
    for epsilon, members in zip(gaps, groups):
        operator = sum(projectors[n] @ bare @ projectors[m] for m, n in members)
        if np.max(np.abs(operator)) <= 1e-14:
            continue
        channels.append(JumpChannel(
            epsilon=epsilon,
            operator=operator,
            rate_forward=rate,
            rate_backward=rate * float(np.exp(-process.beta_active * epsilon)),
        ))
    return channels


def commutator_superoperator(hamiltonian: np.ndarray) -> np.ndarray:
    """Superoperator of rho -> -i[H, rho]"""
    return -1j * (np.kron(hamiltonian, _IDENTITY) - np.kron(_IDENTITY, hamiltonian.T))


def _dissipator_term(operator: np.ndarray, rate: float) -> np.ndarray:
    anticommuted = operator.conj().T @ operator
    return rate * (
        np.kron(operator, operator.conj())
        - 0.5 * np.kron(anticommuted, _IDENTITY)
        - 0.5 * np.kron(_IDENTITY, anticommuted.T)
    )


def dissipator_superoperator(channel: JumpChannel) -> np.ndarray:
    """Forward and backward dissipator of one channel"""
    return (
        _dissipator_term(channel.operator, channel.rate_forward)
        + _dissipator_term(channel.operator.conj().T, channel.rate_backward)
    )


def liouvillian(hamiltonian: np.ndarray, channels: Sequence[JumpChannel]) -> np.ndarray:
    """Full GKLS generator as a 9x9 complex matrix"""
    generator = commutator_superoperator(hamiltonian)
    for channel in channels:
        generator = generator + dissipator_superoperator(channel)
    return generator


def _channels_for(hamiltonian: np.ndarray, processes: Sequence[ProcessParams]) -> List[JumpChannel]:
    channels: List[JumpChannel] = []
    for process in processes:
        for reservoir in Reservoir:
            channels.extend(projected_jump_operators(hamiltonian, reservoir, process))
    return channels


def process_generator(
    spec: EngineSpec,
    processes: Sequence[ProcessParams],
    u: float,
    tau: float = 0.0,
) -> np.ndarray:
    """
    Generator for one or more processes acting together at scale u.

    Several thermal processes may be combined (e.g. Hot and Cold at once);
    the drive is on when any of them switches it on.
    """
    _check_scale(spec, u)
    drive_on = any(process.drive_on for process in processes)
    hamiltonian = _hamiltonian(spec, u, tau, drive_on)
    return liouvillian(hamiltonian, _channels_for(hamiltonian, processes))


def _generator_function(
    spec: EngineSpec,
    process: ProcessParams,
    u: float,
) -> Callable[[float], np.ndarray]:
    if not process.drive_on:
        constant = process_generator(spec, [process], u)
        return lambda tau: constant

    omega = drive_frequency(spec, u)
    base = u * spec.free_hamiltonian

    def generator_at(tau: float) -> np.ndarray:
        hamiltonian = base.copy()
        phase = np.exp(1j * omega * tau)
        hamiltonian[1, 2] = spec.drive_strength * phase
        hamiltonian[2, 1] = spec.drive_strength * np.conj(phase)
        return liouvillian(hamiltonian, _channels_for(hamiltonian, [process]))

    return generator_at


@lru_cache(maxsize=4096)
def stroke_propagator(
    spec: EngineSpec,
    process: ProcessParams,
    u: float,
    dt: float,
    substeps: int,
) -> np.ndarray:
    """
    Linear map vec(rho(0)) -> vec(rho(dt)) of one stroke.

    Classic RK4 applied to the identity; the drive phase restarts with every
    stroke, so the map depends only on (process, u, dt, substeps). The
    returned array is read-only because it is shared through the cache.
    """
    step = dt / substeps
    generator_at = _generator_function(spec, process, u)
    propagator = np.eye(DIM * DIM, dtype=complex)
    start = generator_at(0.0)
    for k in range(substeps):
        tau = k * step
        middle = generator_at(tau + 0.5 * step)
        end = generator_at(min(tau + step, dt))
        k1 = start @ propagator
        k2 = middle @ (propagator + 0.5 * step * k1)
        k3 = middle @ (propagator + 0.5 * step * k2)
        k4 = end @ (propagator + step * k3)
        propagator = propagator + (step / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        start = end
    propagator.setflags(write=False)
    return propagator


def _settle(rho: np.ndarray) -> np.ndarray:
    hermitian_drift = float(np.max(np.abs(rho - rho.conj().T)))
    trace_drift = float(abs(np.trace(rho) - 1.0))
    drift = max(hermitian_drift, trace_drift)
    if drift > DRIFT_ERROR_THRESHOLD:
        raise IntegrationAccuracyError(
            f"state drift {drift:.3e} exceeds {DRIFT_ERROR_THRESHOLD:g} "
            f"(hermiticity {hermitian_drift:.3e}, trace {trace_drift:.3e})"
        )
    if drift > DRIFT_CORRECTION_THRESHOLD:
        logger.debug(f"Re-Hermitizing propagated state (drift {drift:.3e})")
        rho = 0.5 * (rho + rho.conj().T)
        rho = rho / np.trace(rho).real
    smallest = float(linalg.eigvalsh(0.5 * (rho + rho.conj().T))[0])
    if smallest < -NEGATIVITY_TOLERANCE:
        raise IntegrationAccuracyError(f"propagated state has negative eigenvalue {smallest:.3e}")
    return rho


def lindblad_propagate(
    rho: np.ndarray,
    process: ProcessParams,
    u: float,
    dt: float,
    spec: EngineSpec,
    substeps: Optional[int] = None,
) -> np.ndarray:
    """
    Propagate a density matrix over one stroke of duration dt.

    Args:
        rho: Valid 3x3 density matrix
        process: Stroke parameters (bath rates, drive switch)
        u: Control scale, within [u_min, u_max]
        dt: Stroke duration
        spec: Engine parameters
        substeps: RK4 substeps; defaults to keeping EngineSpec.substep

    Returns:
        Density matrix at the end of the stroke

    Raises:
        QdynDomainError: Invalid rho or u out of bounds
        IntegrationAccuracyError: Output drifted beyond 1e-9
    """
    _check_scale(spec, u)
    if dt <= 0:
        raise QdynDomainError(f"dt must be positive, got {dt}")
    rho = validate_density_matrix(rho)
    if substeps is None:
        substeps = max(1, int(np.ceil(round(dt / spec.substep, 9))))
    if dt / substeps > MAX_SUBSTEP + 1e-15:
        raise QdynDomainError(f"substep {dt / substeps:g} exceeds {MAX_SUBSTEP}")
    propagator = stroke_propagator(spec, process, float(u), float(dt), int(substeps))
    evolved = (propagator @ rho.reshape(-1)).reshape(DIM, DIM)
    return _settle(evolved)


def gibbs_state(hamiltonian: np.ndarray, beta: float) -> np.ndarray:
    """Thermal state e^{-beta H} / Z"""
    hamiltonian = _check_hermitian(hamiltonian)
    if beta < 0:
        raise QdynDomainError(f"beta must be non-negative, got {beta}")
    energies, vectors = linalg.eigh(hamiltonian)
    weights = np.exp(-beta * (energies - energies[0]))
    weights = weights / weights.sum()
    return (vectors * weights) @ vectors.conj().T


def expectation_energy(rho: np.ndarray, hamiltonian: np.ndarray) -> float:
    """Real part of tr(rho H)"""
    value = complex(np.einsum("ij,ji->", np.asarray(rho), np.asarray(hamiltonian)))
    if abs(value.imag) > HERMITIAN_TOLERANCE:
        raise QdynDomainError(f"tr(rho H) has imaginary part {value.imag:.3e}")
    return value.real


def encode_density_matrix(rho: np.ndarray) -> np.ndarray:
    """Nine real coordinates: populations, then (Re, Im) of the upper off-diagonals"""
    rho = np.asarray(rho)
    values = [rho[k, k].real for k in range(DIM)]
    for i, j in UPPER_PAIRS:
        values.extend([rho[i, j].real, rho[i, j].imag])
    return np.array(values, dtype=float)


def decode_density_matrix(values: np.ndarray) -> np.ndarray:
    """Inverse of encode_density_matrix (linear, so it also maps arbitrary vectors)"""
    values = np.asarray(values, dtype=float)
    if values.shape != (DIM * DIM,):
        raise QdynDomainError(f"expected {DIM * DIM} coordinates, got shape {values.shape}")
    rho = np.diag(values[:DIM]).astype(complex)
    for k, (i, j) in enumerate(UPPER_PAIRS):
        entry = values[DIM + 2 * k] + 1j * values[DIM + 2 * k + 1]
        rho[i, j] = entry
        rho[j, i] = np.conj(entry)
    return rho


def real_generator(generator: np.ndarray) -> np.ndarray:
    """Action of a Hermiticity-preserving generator on the nine real coordinates"""
    generator = np.asarray(generator, dtype=complex)
    if generator.shape != (DIM * DIM, DIM * DIM):
        raise QdynDomainError(f"generator must be 9x9, got shape {generator.shape}")
    columns = []
    for k in range(DIM * DIM):
        basis = np.zeros(DIM * DIM)
        basis[k] = 1.0
        image = (generator @ decode_density_matrix(basis).reshape(-1)).reshape(DIM, DIM)
        columns.append(encode_density_matrix(image))
    return np.column_stack(columns)


def steady_state(generator: np.ndarray) -> np.ndarray:
    """
    Unique fixed point of a GKLS generator.

    Raises:
        DegenerateSteadyStateError: Kernel dimension differs from one
    """
    kernel = linalg.null_space(real_generator(generator), rcond=STEADY_STATE_RCOND)
    if kernel.shape[1] != 1:
        raise DegenerateSteadyStateError(f"generator kernel has dimension {kernel.shape[1]}")
    rho = decode_density_matrix(kernel[:, 0])
    trace = np.trace(rho).real
    if abs(trace) < 1e-14:
        raise DegenerateSteadyStateError("kernel vector is traceless")
    rho = rho / trace
    residual = float(np.linalg.norm(generator @ rho.reshape(-1)))
    if residual > STEADY_STATE_RESIDUAL:
        raise DegenerateSteadyStateError(f"steady-state residual {residual:.3e} too large")
    return rho
