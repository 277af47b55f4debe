"""Finite-difference verification of every differentiable primitive and of the full model.

Each check builds small random inputs, reduces the output to a scalar with a
fixed random projection and compares the tape gradient to central
differences. Checks run in float64.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from filmseg.film import FilmGeneratorParams, TimeVector, generate_coefficients, modulate
from filmseg.tensor import (LeakyReLU, Tape, Tensor, backward, concat, conv3d, finite_difference_grad,
                            instance_norm, leaky_relu, linear, log_softmax_channel, modulate_channels, precision,
                            relative_error, softmax_channel, transposed_conv3d)
from filmseg.train import cross_entropy_loss, soft_dice_loss
from filmseg.unet import ArchitectureConfig, Placement, build_model, forward

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 1e-3
DEFAULT_STEP = 1e-6
MODEL_SAMPLES = 100

# A check receives an rng and returns (parameters, scalar function of those parameters).
CheckBuilder = Callable[[np.random.Generator], Tuple[List[Tensor], Callable[[], Tensor]]]

_REGISTRY: Dict[str, CheckBuilder] = {}


def register(name: str):
    def decorator(builder: CheckBuilder) -> CheckBuilder:
        _REGISTRY[name] = builder
        return builder
    return decorator


def registered_checks() -> List[str]:
    return list(_REGISTRY)


@dataclass
class CheckResult:
    name: str
    max_error: float
    entries: int
    tolerance: float
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return bool(self.max_error <= self.tolerance)


def _param(rng: np.random.Generator, *shape: int) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _away_from_zero(rng: np.random.Generator, *shape: int) -> Tensor:
    # keeps leaky-ReLU inputs off the kink
    values = rng.normal(size=shape)
    return Tensor(np.sign(values) * (0.1 + np.abs(values)), requires_grad=True)


def _projected(output: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    weights = Tensor(rng.normal(size=output.shape))
    return lambda y: (y * weights).sum()


def _scalar_check(rng: np.random.Generator, params: List[Tensor],
                  op: Callable[[], Tensor]) -> Tuple[List[Tensor], Callable[[], Tensor]]:
    project = _projected(op(), rng)
    return params, lambda: project(op())


@register("add")
def _check_add(rng):
    a, b = _param(rng, 2, 3, 4), _param(rng, 3, 1)
    return _scalar_check(rng, [a, b], lambda: a + b)


@register("sub")
def _check_sub(rng):
    a, b = _param(rng, 2, 3), _param(rng, 2, 3)
    return _scalar_check(rng, [a, b], lambda: a - b)


@register("mul")
def _check_mul(rng):
    a, b = _param(rng, 2, 3, 4), _param(rng, 4)
    return _scalar_check(rng, [a, b], lambda: a * b)


@register("div")
def _check_div(rng):
    a = _param(rng, 3, 4)
    b = Tensor(1.0 + rng.random((3, 4)), requires_grad=True)
    return _scalar_check(rng, [a, b], lambda: a / b)


@register("sum")
def _check_sum(rng):
    a = _param(rng, 2, 3, 4)
    return _scalar_check(rng, [a], lambda: a.sum(axis=(1, 2)))


@register("slice")
def _check_slice(rng):
    a = _param(rng, 2, 4, 3)
    return _scalar_check(rng, [a], lambda: a[:, 1:3])


@register("concat")
def _check_concat(rng):
    a, b = _param(rng, 1, 2, 2, 2, 2), _param(rng, 1, 3, 2, 2, 2)
    return _scalar_check(rng, [a, b], lambda: concat([a, b], axis=1))


@register("linear")
def _check_linear(rng):
    x, w, b = _param(rng, 4, 3), _param(rng, 5, 3), _param(rng, 5)
    return _scalar_check(rng, [x, w, b], lambda: linear(x, w, b))


@register("leaky_relu")
def _check_leaky_relu(rng):
    x = _away_from_zero(rng, 2, 3, 4)
    return _scalar_check(rng, [x], lambda: leaky_relu(x, 0.01))


@register("softmax_channel")
def _check_softmax(rng):
    x = _param(rng, 2, 3, 2, 2, 2)
    return _scalar_check(rng, [x], lambda: softmax_channel(x))


@register("log_softmax_channel")
def _check_log_softmax(rng):
    x = _param(rng, 2, 3, 2, 2, 2)
    return _scalar_check(rng, [x], lambda: log_softmax_channel(x))


@register("instance_norm")
def _check_instance_norm(rng):
    x, gain, shift = _param(rng, 2, 3, 3, 2, 2), _param(rng, 3), _param(rng, 3)
    return _scalar_check(rng, [x, gain, shift], lambda: instance_norm(x, gain, shift))


@register("modulate")
def _check_modulate(rng):
    x, gamma, beta = _param(rng, 2, 3, 2, 2, 2), _param(rng, 2, 3), _param(rng, 2, 3)
    return _scalar_check(rng, [x, gamma, beta], lambda: modulate_channels(x, gamma, beta))


@register("conv3d")
def _check_conv3d(rng):
    x, w, b = _param(rng, 2, 2, 4, 4, 4), _param(rng, 3, 2, 3, 3, 3), _param(rng, 3)
    return _scalar_check(rng, [x, w, b], lambda: conv3d(x, w, b, stride=1, padding=1))


@register("conv3d_strided")
def _check_conv3d_strided(rng):
    x, w, b = _param(rng, 1, 2, 4, 4, 4), _param(rng, 3, 2, 2, 2, 2), _param(rng, 3)
    return _scalar_check(rng, [x, w, b], lambda: conv3d(x, w, b, stride=2))


@register("transposed_conv3d")
def _check_transposed_conv3d(rng):
    x, w, b = _param(rng, 1, 3, 2, 2, 2), _param(rng, 3, 2, 2, 2, 2), _param(rng, 2)
    return _scalar_check(rng, [x, w, b], lambda: transposed_conv3d(x, w, b, stride=2))


@register("film_generator")
def _check_film(rng):
    generator = FilmGeneratorParams.initialize(3, rng, hidden=4)
    generator.w2.data[...] = rng.normal(size=generator.w2.shape)
    generator.b1.data[...] = 0.5
    x = _param(rng, 2, 3, 2, 2, 2)
    times = [TimeVector(0.0, 60.0, 150.0), TimeVector(0.0, 95.0, 410.0)]
    op = lambda: modulate(x, generate_coefficients(times, generator))
    return _scalar_check(rng, [x] + generator.tensors(), op)


@register("soft_dice_loss")
def _check_soft_dice(rng):
    logits = _param(rng, 2, 2, 2, 2, 2)
    target = rng.integers(0, 2, size=(2, 2, 2, 2))
    return [logits], lambda: soft_dice_loss(softmax_channel(logits), target)


@register("cross_entropy_loss")
def _check_cross_entropy(rng):
    logits = _param(rng, 2, 2, 2, 2, 2)
    target = rng.integers(0, 2, size=(2, 2, 2, 2))
    return [logits], lambda: cross_entropy_loss(logits, target)


def model_check_builder(placement: Placement = Placement.ALL):
    """Depth-2 model on a 1x3x8x8x8 input with perturbed generator outputs."""
    def builder(rng):
        config = ArchitectureConfig(stage_channels=(4, 8), bottleneck_channels=16, placement=placement,
                                    seed=int(rng.integers(2 ** 31)))
        model = build_model(config)
        for generator in model.film_generators.values():
            generator.w2.data[...] = 0.1 * rng.normal(size=generator.w2.shape)
            generator.b2.data[...] = 0.1 * rng.normal(size=generator.b2.shape)
        x = Tensor(rng.normal(size=(1, 3, 8, 8, 8)))
        t = TimeVector(0.0, 75.0, 240.0)
        return _scalar_check(rng, model.parameters(), lambda: forward(model, x, t))
    return builder


register("unet_all")(model_check_builder(Placement.ALL))


def _candidate_entries(params: Sequence[Tensor], sampled: bool,
                       rng: np.random.Generator) -> List[Tuple[int, int]]:
    entries = [(i, j) for i, p in enumerate(params) for j in range(p.size)]
    if not sampled:
        return entries
    return [entries[k] for k in rng.permutation(len(entries))]


def _leaky_pattern(tape: Tape) -> List[np.ndarray]:
    return [node.function.multiplier for node in tape.nodes if isinstance(node.function, LeakyReLU)]


def _same_pattern(a: List[np.ndarray], b: List[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def run_check(name: str, seed: int = 0, tolerance: float = DEFAULT_TOLERANCE, h: float = DEFAULT_STEP,
              samples: Optional[int] = None) -> CheckResult:
    """Compare tape and central-difference gradients for one registered check.

    An entry whose +h or -h evaluation flips any leaky-ReLU unit to the
    other side of its kink is skipped; the central difference is not a
    derivative estimate there.
    """
    builder = _REGISTRY[name]
    if samples is None and name.startswith("unet"):
        samples = MODEL_SAMPLES
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        params, loss_fn = builder(rng)
        for p in params:
            p.zero_grad()
        with Tape() as tape:
            loss = loss_fn()
        backward(tape, loss)
        reference = _leaky_pattern(tape)
        analytic = [np.zeros(p.shape) if p.grad is None else p.grad for p in params]

        patterns: List[List[np.ndarray]] = []

        def evaluate(_):
            with Tape() as shifted:
                value = loss_fn().item()
            patterns.append(_leaky_pattern(shifted))
            return value

        errors, skipped = [], 0
        for i, j in _candidate_entries(params, samples is not None, rng):
            if samples is not None and len(errors) >= samples:
                break
            patterns.clear()
            numeric = finite_difference_grad(evaluate, params, h=h, entries=[(i, j)])
            if not all(_same_pattern(reference, p) for p in patterns):
                skipped += 1
                continue
            errors.append(relative_error(analytic[i].reshape(-1)[j], numeric[i].reshape(-1)[j]))
    max_error = float(np.max(errors)) if errors else math.inf
    result = CheckResult(name=name, max_error=max_error, entries=len(errors), tolerance=tolerance, skipped=skipped)
    logger.debug("gradcheck %s: max relative error %.3g over %d entries (%d skipped at kinks)",
                 name, result.max_error, result.entries, skipped)
    return result


def run_suite(names: Optional[Sequence[str]] = None, seed: int = 0,
              tolerance: float = DEFAULT_TOLERANCE) -> List[CheckResult]:
    """Run the named checks, or every registered one, in order.

    Raises:
        KeyError: If a name is not registered
    """
    names = list(names) if names else registered_checks()
    unknown = [n for n in names if n not in _REGISTRY]
    if unknown:
        raise KeyError(f"Unknown gradient checks: {', '.join(unknown)}")
    return [run_check(name, seed=seed, tolerance=tolerance) for name in names]
