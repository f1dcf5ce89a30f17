"""
Versioned JSON checkpoints.

Arrays are stored as {shape, values} with row-major values. Python's float
repr round-trips exactly, so a saved and reloaded checkpoint reproduces every
parameter bitwise.
"""

import json
import os
from pathlib import Path
from typing import Any, Dict, List, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError, model_validator

from shared.config import get_logger

logger = get_logger(__name__)

FORMAT_VERSION = 1


class CheckpointIntegrityError(Exception):
    """Raised for unreadable, truncated or inconsistent checkpoints"""
    pass


class CheckpointVersionError(Exception):
    """Raised when a checkpoint was written by a newer format version"""

    def __init__(self, found: Any, supported: int = FORMAT_VERSION):
        self.found = found
        self.supported = supported
        super().__init__(f"checkpoint format version {found} is not supported (supported: {supported})")


class ArrayPayload(BaseModel):
    """One dense array in row-major order"""
    shape: List[int]
    values: List[float]

    @model_validator(mode="after")
    def check_size(self) -> "ArrayPayload":
        if any(dim < 0 for dim in self.shape):
            raise ValueError(f"negative dimension in shape {self.shape}")
        expected = int(np.prod(self.shape, dtype=np.int64))
        if expected != len(self.values):
            raise ValueError(f"{len(self.values)} values do not fill shape {self.shape}")
        return self

    @classmethod
    def from_array(cls, array: np.ndarray) -> "ArrayPayload":
        array = np.asarray(array, dtype=float)
        return cls(shape=list(array.shape), values=array.reshape(-1).tolist())

    def to_array(self) -> np.ndarray:
        return np.array(self.values, dtype=float).reshape(self.shape)


class AdamPayload(BaseModel):
    """Adam moments and step counter of one optimizer"""
    step: int = Field(..., ge=0)
    m: List[ArrayPayload]
    v: List[ArrayPayload]

    @model_validator(mode="after")
    def check_moments(self) -> "AdamPayload":
        if [p.shape for p in self.m] != [p.shape for p in self.v]:
            raise ValueError("first and second moment shapes differ")
        return self


class Checkpoint(BaseModel):
    """Complete training state"""
    format_version: int = FORMAT_VERSION
    step: int = Field(..., ge=0)
    config: Dict[str, Any] = Field(default_factory=dict, description="Echo of the run configuration")
    networks: Dict[str, List[ArrayPayload]]
    optimizers: Dict[str, AdamPayload] = Field(default_factory=dict)
    temperatures: Dict[str, float] = Field(default_factory=dict)
    rng_state: Dict[str, Dict[str, Any]] = Field(default_factory=dict)
    metadata: Dict[str, Any] = Field(default_factory=dict)


def _describe(error: ValidationError) -> str:
    parts = []
    for item in error.errors():
        location = ".".join(str(part) for part in item["loc"]) or "<root>"
        parts.append(f"{location}: {item['msg']}")
    return "; ".join(parts)


def checkpoint_save(path: Union[str, Path], checkpoint: Checkpoint) -> Path:
    """Write a checkpoint atomically (temporary file, then rename)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_name(path.name + ".tmp")
    with open(tmp_path, "w", encoding="utf-8") as f:
        json.dump(checkpoint.model_dump(mode="python"), f)
    os.replace(tmp_path, path)
    logger.info(f"Checkpoint saved: {path} (step {checkpoint.step})")
    return path


def checkpoint_load(path: Union[str, Path]) -> Checkpoint:
    """
    Read and validate a checkpoint.

    Raises:
        CheckpointIntegrityError: File unreadable, truncated, or arrays inconsistent
        CheckpointVersionError: format_version newer than this code supports
    """
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except OSError as e:
        raise CheckpointIntegrityError(f"cannot read checkpoint {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise CheckpointIntegrityError(f"checkpoint {path} is truncated or not JSON: {e}") from e

    if not isinstance(raw, dict):
        raise CheckpointIntegrityError(f"checkpoint {path} does not contain a JSON object")
    found = raw.get("format_version")
    if not isinstance(found, int) or found < 1 or found > FORMAT_VERSION:
        raise CheckpointVersionError(found)

    try:
        return Checkpoint.model_validate(raw)
    except ValidationError as e:
        raise CheckpointIntegrityError(f"checkpoint {path} is inconsistent: {_describe(e)}") from e


def generator_state(rng: np.random.Generator) -> Dict[str, Any]:
    return rng.bit_generator.state


def restore_generator(state: Dict[str, Any]) -> np.random.Generator:
    """Rebuild a Generator from a stored bit-generator state"""
    try:
        bit_generator = getattr(np.random, state["bit_generator"])()
        bit_generator.state = state
    except (KeyError, AttributeError, TypeError, ValueError) as e:
        raise CheckpointIntegrityError(f"invalid RNG state: {e}") from e
    return np.random.Generator(bit_generator)
