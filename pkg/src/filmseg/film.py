"""Acquisition-time conditioning through feature-wise linear modulation."""

import math
from dataclasses import dataclass
from typing import List, Sequence, Union

import numpy as np

from filmseg import FilmSegError
from filmseg.tensor import Tensor, leaky_relu, linear, modulate_channels

# Post-contrast schedules span roughly 0-600 s; dividing keeps generator inputs O(1).
TIME_SCALE_SECONDS = 600.0
DEFAULT_HIDDEN = 16


class FilmError(FilmSegError):
    """Error raised for malformed time vectors or FiLM coefficients."""
    pass


@dataclass(frozen=True)
class TimeVector:
    """Acquisition times in seconds since injection of the three input channels."""
    t1: float
    t2: float
    t3: float

    def __post_init__(self):
        values = (self.t1, self.t2, self.t3)
        if not all(math.isfinite(v) for v in values):
            raise FilmError(f"Acquisition times must be finite, got {values}")
        if self.t1 < 0:
            raise FilmError(f"Pre-contrast time must be >= 0, got {self.t1}")
        if not self.t1 <= self.t2 <= self.t3:
            raise FilmError(f"Acquisition times must be non-decreasing, got {values}")

    @classmethod
    def from_sequence(cls, values: Sequence[float]) -> "TimeVector":
        if len(values) != 3:
            raise FilmError(f"A time vector has exactly three entries, got {len(values)}")
        return cls(*(float(v) for v in values))

    def as_array(self) -> np.ndarray:
        return np.array([self.t1, self.t2, self.t3], dtype=np.float64)


TimeInput = Union[TimeVector, Sequence[TimeVector]]


@dataclass
class FilmGeneratorParams:
    """Two-layer generator mapping a time vector to 2C modulation values."""
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @property
    def channels(self) -> int:
        return self.w2.shape[0] // 2

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    def tensors(self) -> List[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    @classmethod
    def initialize(cls, channels: int, rng: np.random.Generator,
                   hidden: int = DEFAULT_HIDDEN) -> "FilmGeneratorParams":
        """He-initialized hidden layer; zero output layer so modulation starts as identity."""
        w1 = rng.normal(0.0, math.sqrt(2.0 / 3), size=(hidden, 3))
        return cls(
            w1=Tensor(w1, requires_grad=True),
            b1=Tensor(np.zeros(hidden), requires_grad=True),
            w2=Tensor(np.zeros((2 * channels, hidden)), requires_grad=True),
            b2=Tensor(np.zeros(2 * channels), requires_grad=True),
        )


@dataclass
class FilmCoefficients:
    gamma: Tensor
    beta: Tensor

    @property
    def channels(self) -> int:
        return self.gamma.shape[-1]


def time_features(t: TimeInput) -> np.ndarray:
    """Normalized generator input: shape (3,) for one vector, (N, 3) for a batch."""
    if isinstance(t, TimeVector):
        return t.as_array() / TIME_SCALE_SECONDS
    return np.stack([v.as_array() for v in t]) / TIME_SCALE_SECONDS


def generate_coefficients(t: TimeInput, params: FilmGeneratorParams,
                          slope: float = 0.01) -> FilmCoefficients:
    """Evaluate the generator; the first C outputs offset gamma from 1, the last C are beta."""
    channels = params.channels
    if params.w2.shape[0] != 2 * channels or params.w1.shape[1] != 3:
        raise FilmError(f"Malformed generator: w1 {params.w1.shape}, w2 {params.w2.shape}")
    features = Tensor(time_features(t))
    hidden = leaky_relu(linear(features, params.w1, params.b1), slope)
    raw = linear(hidden, params.w2, params.b2)
    gamma = 1.0 + raw[..., :channels]
    beta = raw[..., channels:]
    return FilmCoefficients(gamma=gamma, beta=beta)


def modulate(x: Tensor, coeffs: FilmCoefficients) -> Tensor:
    """FiLM(x) = gamma * x + beta, applied per channel (and per sample for batched coefficients)."""
    if x.ndim != 5:
        raise FilmError(f"Feature map must be N x C x D x H x W, got {x.shape}")
    if coeffs.gamma.shape != coeffs.beta.shape:
        raise FilmError(f"gamma {coeffs.gamma.shape} and beta {coeffs.beta.shape} differ in shape")
    if coeffs.channels != x.shape[1]:
        raise FilmError(f"Feature map has {x.shape[1]} channels but coefficients have {coeffs.channels}")
    if coeffs.gamma.ndim == 2 and coeffs.gamma.shape[0] not in (1, x.shape[0]):
        raise FilmError(
            f"Batched coefficients for {coeffs.gamma.shape[0]} samples do not match batch size {x.shape[0]}")
    return modulate_channels(x, coeffs.gamma, coeffs.beta)
