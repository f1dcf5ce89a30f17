"""
Run configuration.

Every section is a pydantic model whose defaults reproduce the reference
experiment, so an empty config file runs it. Values come from a YAML file and
can be overridden by environment variables of the form
QHE_<SECTION>__<KEY> (for example QHE_TRAIN__BATCH_SIZE=256 or QHE_SEED=3).
"""

import copy
import os
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np
import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from engine.qdyn import EngineSpec, ProcessKind
from engine.schedule import BoltzmannSegment
from shared.config import get_logger

logger = get_logger(__name__)

ENV_PREFIX = "QHE_"
ENV_NESTING = "__"


class ConfigError(Exception):
    """Raised when a config file is missing, unreadable or invalid"""
    pass


class EntropySchedule(BaseModel):
    """Exponentially decaying target entropies of the two policy heads"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    discrete_init: float = Field(0.98 * float(np.log(3.0)), description="Initial discrete target entropy")
    discrete_final: float = Field(0.03, description="Final discrete target entropy")
    discrete_decay: float = Field(144_000.0, gt=0.0, description="Decay constant in environment steps")
    continuous_init: float = Field(-0.72, description="Initial continuous target entropy")
    continuous_final: float = Field(-3.8, description="Final continuous target entropy")
    continuous_decay: float = Field(144_000.0, gt=0.0, description="Decay constant in environment steps")


class AdamConfig(BaseModel):
    """Adam hyperparameters shared by every optimizer"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    learning_rate: float = Field(3e-4, gt=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)


class TrainConfig(BaseModel):
    """Soft actor-critic training parameters; u bounds and dt live in the engine section"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    gamma: float = Field(0.995, ge=0.0, lt=1.0, description="Discount factor")
    tau: float = Field(0.005, gt=0.0, le=1.0, description="Polyak coefficient")
    batch_size: int = Field(512, ge=1)
    buffer_size: int = Field(160_000, ge=1)
    total_steps: int = Field(500_000, ge=0, description="Environment steps")
    warmup_steps: int = Field(5_000, ge=0, description="Uniform-random actions before the policy acts")
    update_every: int = Field(50, ge=1, description="Environment steps between update rounds")
    updates_per_round: int = Field(50, ge=1, description="Gradient rounds per update round")
    eval_every: int = Field(5_000, ge=1)
    eval_len: int = Field(1_000, ge=1)
    snapshot_len: int = Field(21, ge=0, description="Deterministic actions kept per evaluation snapshot")
    checkpoint_every: int = Field(50_000, ge=1)
    hidden_dims: Tuple[int, ...] = Field((256, 256), min_length=1)
    shared_trunk: bool = Field(True, description="One policy trunk for both heads")
    target_samples: int = Field(1, ge=1, description="u samples per branch in the target expectation")
    log_std_min: float = -20.0
    log_std_max: float = 2.0
    initial_log_alpha_d: float = 0.0
    initial_log_alpha_c: float = 0.0
    adam: AdamConfig = Field(default_factory=AdamConfig)
    entropy: EntropySchedule = Field(default_factory=EntropySchedule)

    @field_validator("hidden_dims")
    @classmethod
    def validate_hidden_dims(cls, v: Tuple[int, ...]) -> Tuple[int, ...]:
        """Layer widths are positive"""
        if any(width <= 0 for width in v):
            raise ValueError(f"hidden widths must be positive, got {v}")
        return tuple(v)

    @model_validator(mode="after")
    def check_log_std_bounds(self) -> "TrainConfig":
        if self.log_std_min >= self.log_std_max:
            raise ValueError("log_std_min must be below log_std_max")
        return self


class EvalSettings(BaseModel):
    """Scoring of rollouts"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    gamma: float = Field(0.995, ge=0.0, lt=1.0)
    rollout_steps: int = Field(1_000, ge=0)
    steady_reference: float = Field(0.399, gt=0.0, description="Steady-coupling power limit, external constant")


class FitSettings(BaseModel):
    """Period detection and sigmoid fitting"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    scan_window: int = Field(200, ge=2)
    decimals: int = Field(3, ge=0, description="u rounding used for period detection")
    working_1_width: float = Field(0.05, gt=0.0)
    working_2_width: float = Field(0.25, gt=0.0)


def _fitted_working_1() -> BoltzmannSegment:
    return BoltzmannSegment(d=ProcessKind.WORK, A1=0.300, A2=1.495, t0=6.75, width=0.05, times=[7.0])


def _fitted_working_2() -> BoltzmannSegment:
    return BoltzmannSegment(
        d=ProcessKind.WORK, A1=1.497, A2=0.300, t0=10.25, width=0.25, times=[9.0, 10.0, 11.0, 12.0],
    )


class BaselineSettings(BaseModel):
    """Strokes of the comparison cycles"""
    model_config = ConfigDict(extra="forbid")

    hot_u: float = 1.495
    cold_u: float = 0.300
    ramp_low: float = 0.3
    ramp_high: float = 1.5
    cycle1_ramp_up: int = Field(1, ge=1)
    cycle1_ramp_down: int = Field(1, ge=1)
    cycle2_ramp_up: int = Field(1, ge=1)
    cycle2_ramp_down: int = Field(4, ge=1)
    fitted_working_1: BoltzmannSegment = Field(default_factory=_fitted_working_1)
    fitted_working_2: BoltzmannSegment = Field(default_factory=_fitted_working_2)


class RunConfig(BaseModel):
    """Complete configuration of a run"""
    model_config = ConfigDict(extra="forbid")

    engine: EngineSpec = Field(default_factory=EngineSpec)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalSettings = Field(default_factory=EvalSettings)
    fit: FitSettings = Field(default_factory=FitSettings)
    baselines: BaselineSettings = Field(default_factory=BaselineSettings)
    seed: int = Field(1, ge=0)
    output_dir: Path = Path("runs")


def _set_nested(data: Dict[str, Any], path: List[str], value: str) -> None:
    node = data
    for key in path[:-1]:
        child = node.get(key)
        if not isinstance(child, dict):
            child = {}
            node[key] = child
        node = child
    node[path[-1]] = value


def apply_env_overrides(data: Dict[str, Any], environ: Optional[Mapping[str, str]] = None) -> Dict[str, Any]:
    """
    Overlay QHE_* environment variables on a raw config mapping.

    Values are parsed as YAML scalars so lists and booleans work
    (QHE_TRAIN__HIDDEN_DIMS="[64, 64]").
    """
    environ = os.environ if environ is None else environ
    merged = copy.deepcopy(data)
    for name in sorted(environ):
        if not name.startswith(ENV_PREFIX):
            continue
        path = [part.lower() for part in name[len(ENV_PREFIX):].split(ENV_NESTING) if part]
        if not path:
            continue
        raw = environ[name]
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError:
            value = raw
        logger.debug(f"Config override from {name}")
        _set_nested(merged, path, value)
    return merged


def _format_validation_error(error: ValidationError) -> str:
    lines = []
    for item in error.errors():
        location = ".".join(str(part) for part in item["loc"]) or "<root>"
        lines.append(f"{location}: {item['msg']}")
    return "; ".join(lines)


def build_config(data: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Validate a raw mapping into a RunConfig, naming offending key paths"""
    try:
        return RunConfig.model_validate(data or {})
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {_format_validation_error(e)}") from e


def load_config(
    path: Optional[Union[str, Path]] = None,
    environ: Optional[Mapping[str, str]] = None,
    env_file: Optional[Union[str, Path]] = None,
) -> RunConfig:
    """
    Load a YAML config file, apply environment overrides and validate.

    Args:
        path: YAML file; None uses the defaults
        environ: Mapping to read overrides from (default: os.environ after .env loading)
        env_file: Optional .env file loaded before reading overrides

    Raises:
        ConfigError: Missing file, YAML syntax error or invalid values
    """
    if environ is None:
        if env_file is not None:
            load_dotenv(env_file)
        else:
            load_dotenv()

    data: Dict[str, Any] = {}
    if path is not None:
        config_path = Path(path)
        if not config_path.is_file():
            raise ConfigError(f"config file not found: {config_path}")
        try:
            with open(config_path, "r", encoding="utf-8") as f:
                loaded = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse {config_path}: {e}") from e
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError(f"{config_path} must contain a mapping at the top level")
        data = loaded or {}

    return build_config(apply_env_overrides(data, environ))


def config_echo(config: RunConfig) -> Dict[str, Any]:
    """JSON-compatible dump of a config, for checkpoints and reports"""
    return config.model_dump(mode="json")
