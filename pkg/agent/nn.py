"""
Dense feed-forward networks with an exact hand-written reverse pass.

Layers are affine maps x @ W + b with ReLU between them and a linear output.
Parameters are never modified in place: every update returns new arrays, so
a forward cache can detect that its parameters were replaced.
"""

from dataclasses import dataclass
from typing import List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from shared.settings import AdamConfig


class MlpDomainError(Exception):
    """Raised for invalid network inputs"""
    pass


class MlpShapeError(MlpDomainError):
    """Raised when array shapes do not match the network spec"""
    pass


class StaleCacheError(MlpDomainError):
    """Raised when backward() receives a cache produced by other parameters"""
    pass


class NonFiniteGradientError(Exception):
    """Raised when an optimizer step receives NaN or infinite gradients"""
    pass


class MlpSpec(BaseModel):
    """Layer widths of a ReLU network"""
    model_config = ConfigDict(frozen=True)

    input_dim: int = Field(..., gt=0)
    hidden_dims: Tuple[int, ...] = (256, 256)
    output_dim: int = Field(..., gt=0)

    @field_validator("hidden_dims")
    @classmethod
    def validate_hidden_dims(cls, v: Tuple[int, ...]) -> Tuple[int, ...]:
        """Hidden widths are positive"""
        if any(width <= 0 for width in v):
            raise ValueError(f"hidden widths must be positive, got {v}")
        return tuple(v)

    @property
    def layer_shapes(self) -> List[Tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))


class ParamSet(Protocol):
    """Anything the optimizer and the polyak update can act on"""

    def arrays(self) -> List[np.ndarray]:
        ...

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "ParamSet":
        ...


def check_shapes(expected: Sequence[np.ndarray], given: Sequence[np.ndarray], label: str) -> None:
    if len(expected) != len(given):
        raise MlpShapeError(f"{label}: expected {len(expected)} arrays, got {len(given)}")
    for index, (a, b) in enumerate(zip(expected, given)):
        if np.shape(a) != np.shape(b):
            raise MlpShapeError(f"{label}: array {index} has shape {np.shape(b)}, expected {np.shape(a)}")


@dataclass(eq=False)
class MlpParams:
    """Weights (fan_in, fan_out) and biases (fan_out,) per layer"""
    spec: MlpSpec
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def arrays(self) -> List[np.ndarray]:
        out: List[np.ndarray] = []
        for weight, bias in zip(self.weights, self.biases):
            out.extend([weight, bias])
        return out

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "MlpParams":
        arrays = [np.asarray(a, dtype=float) for a in arrays]
        check_shapes(self.arrays(), arrays, "MlpParams")
        return MlpParams(spec=self.spec, weights=arrays[0::2], biases=arrays[1::2])

    def copy(self) -> "MlpParams":
        return self.with_arrays([a.copy() for a in self.arrays()])

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray]) -> "MlpParams":
        """Rebuild parameters (and the MlpSpec) from interleaved weight/bias arrays"""
        arrays = [np.asarray(a, dtype=float) for a in arrays]
        if len(arrays) < 2 or len(arrays) % 2:
            raise MlpShapeError(f"expected interleaved weight/bias arrays, got {len(arrays)}")
        weights, biases = arrays[0::2], arrays[1::2]
        for layer, (weight, bias) in enumerate(zip(weights, biases)):
            if weight.ndim != 2 or bias.shape != (weight.shape[1],):
                raise MlpShapeError(
                    f"layer {layer}: weight {weight.shape} and bias {bias.shape} do not fit"
                )
            if layer and weight.shape[0] != weights[layer - 1].shape[1]:
                raise MlpShapeError(
                    f"layer {layer}: fan-in {weight.shape[0]} does not match "
                    f"previous fan-out {weights[layer - 1].shape[1]}"
                )
        spec = MlpSpec(
            input_dim=weights[0].shape[0],
            hidden_dims=tuple(w.shape[1] for w in weights[:-1]),
            output_dim=weights[-1].shape[1],
        )
        return cls(spec=spec, weights=weights, biases=biases)


@dataclass(eq=False)
class MlpGrads:
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def arrays(self) -> List[np.ndarray]:
        out: List[np.ndarray] = []
        for weight, bias in zip(self.weights, self.biases):
            out.extend([weight, bias])
        return out

    def __add__(self, other: "MlpGrads") -> "MlpGrads":
        return MlpGrads(
            weights=[a + b for a, b in zip(self.weights, other.weights)],
            biases=[a + b for a, b in zip(self.biases, other.biases)],
        )


@dataclass(frozen=True, eq=False)
class MlpCache:
    """Activations kept by forward() for the reverse pass"""
    params: MlpParams
    layer_inputs: List[np.ndarray]
    pre_activations: List[np.ndarray]
    squeeze: bool


def init(spec: MlpSpec, seed: Union[int, np.random.Generator]) -> MlpParams:
    """Weights uniform in +-1/sqrt(fan_in), zero biases"""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in spec.layer_shapes:
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(spec=spec, weights=weights, biases=biases)


def forward(params: MlpParams, x: np.ndarray) -> Tuple[np.ndarray, MlpCache]:
    """
    Evaluate the network on one input vector or a (batch, input_dim) array.

    Returns:
        (output, cache) with output shaped like the input's batch layout
    """
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.spec.input_dim:
        raise MlpShapeError(f"input has shape {x.shape}, expected (*, {params.spec.input_dim})")
    if not np.all(np.isfinite(x)):
        raise MlpDomainError("input contains non-finite values")

    layer_inputs, pre_activations = [], []
    hidden = x
    last = len(params.weights) - 1
    for layer, (weight, bias) in enumerate(zip(params.weights, params.biases)):
        layer_inputs.append(hidden)
        z = hidden @ weight + bias
        if layer == last:
            hidden = z
        else:
            pre_activations.append(z)
            hidden = np.maximum(z, 0.0)

    output = hidden[0] if squeeze else hidden
    return output, MlpCache(params=params, layer_inputs=layer_inputs, pre_activations=pre_activations, squeeze=squeeze)


def backward(params: MlpParams, cache: MlpCache, grad_output: np.ndarray) -> Tuple[MlpGrads, np.ndarray]:
    """
    Reverse pass for the scalar loss whose gradient w.r.t. the output is given.

    Returns:
        (parameter gradients, gradient w.r.t. the input)
    """
    if cache.params is not params:
        raise StaleCacheError("cache was produced by different parameters")
    grad = np.asarray(grad_output, dtype=float)
    if cache.squeeze:
        grad = grad[None, :]
    expected = (cache.layer_inputs[0].shape[0], params.spec.output_dim)
    if grad.shape != expected:
        raise MlpShapeError(f"output gradient has shape {grad.shape}, expected {expected}")

    grad_weights: List[Optional[np.ndarray]] = [None] * len(params.weights)
    grad_biases: List[Optional[np.ndarray]] = [None] * len(params.weights)
    for layer in range(len(params.weights) - 1, -1, -1):
        grad_weights[layer] = cache.layer_inputs[layer].T @ grad
        grad_biases[layer] = grad.sum(axis=0)
        grad = grad @ params.weights[layer].T
        if layer > 0:
            grad = grad * (cache.pre_activations[layer - 1] > 0.0)

    grad_input = grad[0] if cache.squeeze else grad
    return MlpGrads(weights=grad_weights, biases=grad_biases), grad_input


@dataclass(eq=False)
class AdamState:
    """First and second moments per parameter array, step counter, hyperparameters"""
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int
    config: AdamConfig


def adam_init(params: ParamSet, config: Optional[AdamConfig] = None) -> AdamState:
    arrays = params.arrays()
    return AdamState(
        m=[np.zeros_like(a) for a in arrays],
        v=[np.zeros_like(a) for a in arrays],
        step=0,
        config=config or AdamConfig(),
    )


def adam_step(
    params: ParamSet,
    grads: Union[Sequence[np.ndarray], MlpGrads],
    state: AdamState,
) -> Tuple[ParamSet, AdamState]:
    """
    Bias-corrected Adam update.

    Raises:
        MlpShapeError: Gradient shapes do not match the parameters
        NonFiniteGradientError: A gradient entry is NaN or infinite
    """
    grad_arrays = grads.arrays() if hasattr(grads, "arrays") else [np.asarray(g, dtype=float) for g in grads]
    arrays = params.arrays()
    check_shapes(arrays, grad_arrays, "gradients")
    check_shapes(arrays, state.m, "Adam moments")
    for index, g in enumerate(grad_arrays):
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"gradient array {index} contains non-finite values")

    cfg = state.config
    step = state.step + 1
    correction1 = 1.0 - cfg.beta1 ** step
    correction2 = 1.0 - cfg.beta2 ** step
    new_arrays, new_m, new_v = [], [], []
    for p, g, m, v in zip(arrays, grad_arrays, state.m, state.v):
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
        update = cfg.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + cfg.eps)
        new_arrays.append(p - update)
        new_m.append(m)
        new_v.append(v)
    return params.with_arrays(new_arrays), AdamState(m=new_m, v=new_v, step=step, config=cfg)
