"""Tests for the film module."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from filmseg.film import (TIME_SCALE_SECONDS, FilmCoefficients, FilmError, FilmGeneratorParams, TimeVector,
                          generate_coefficients, modulate, time_features)
from filmseg.tensor import Tensor, precision


times = st.lists(st.floats(0, 900, allow_nan=False), min_size=3, max_size=3).map(sorted)


def test_time_vector_validation():
    """Test time vector validation."""
    with pytest.raises(FilmError):
        TimeVector(-1.0, 0.0, 10.0)
    with pytest.raises(FilmError):
        TimeVector(0.0, 100.0, 50.0)
    with pytest.raises(FilmError):
        TimeVector(0.0, float("nan"), 50.0)
    with pytest.raises(FilmError):
        TimeVector.from_sequence([0.0, 1.0])


def test_time_features_are_scaled():
    """Test generator input scaling."""
    features = time_features(TimeVector(0.0, 60.0, 600.0))
    np.testing.assert_allclose(features, [0.0, 60.0 / TIME_SCALE_SECONDS, 1.0])
    batch = time_features([TimeVector(0.0, 60.0, 600.0)] * 2)
    assert batch.shape == (2, 3)


@given(times)
@settings(deadline=None, max_examples=30)
def test_fresh_generator_is_identity(values):
    """Test that a new generator yields identity coefficients."""
    generator = FilmGeneratorParams.initialize(4, np.random.default_rng(0))
    coeffs = generate_coefficients(TimeVector.from_sequence(values), generator)
    np.testing.assert_array_equal(coeffs.gamma.data, np.ones(4))
    np.testing.assert_array_equal(coeffs.beta.data, np.zeros(4))


def test_identity_modulation_is_bit_exact(rng):
    """Test that identity modulation leaves features untouched."""
    generator = FilmGeneratorParams.initialize(3, rng)
    x = Tensor(rng.normal(size=(2, 3, 2, 2, 2)))
    out = modulate(x, generate_coefficients(TimeVector(0.0, 90.0, 180.0), generator))
    np.testing.assert_array_equal(out.data, x.data)


def test_perturbed_generator_depends_on_time(rng):
    """Test that trained coefficients depend on the times."""
    generator = FilmGeneratorParams.initialize(3, rng)
    generator.w2.data[...] = rng.normal(size=generator.w2.shape)
    a = generate_coefficients(TimeVector(0.0, 60.0, 120.0), generator)
    b = generate_coefficients(TimeVector(0.0, 300.0, 500.0), generator)
    assert not np.array_equal(a.gamma.data, b.gamma.data)


def test_batched_coefficients_apply_per_sample(rng):
    """Test per-sample coefficients in a batch."""
    generator = FilmGeneratorParams.initialize(2, rng)
    generator.b2.data[...] = [1.0, -0.5, 0.25, 2.0]
    coeffs = generate_coefficients([TimeVector(0.0, 60.0, 120.0), TimeVector(0.0, 90.0, 240.0)], generator)
    assert coeffs.gamma.shape == (2, 2)
    x = Tensor(np.ones((2, 2, 1, 1, 1)))
    out = modulate(x, coeffs).data[:, :, 0, 0, 0]
    np.testing.assert_allclose(out, [[2.0 + 0.25, 0.5 + 2.0]] * 2)


def test_modulate_channel_mismatch(rng):
    """Test modulation with the wrong channel count."""
    generator = FilmGeneratorParams.initialize(3, rng)
    coeffs = generate_coefficients(TimeVector(0.0, 90.0, 180.0), generator)
    with pytest.raises(FilmError):
        modulate(Tensor(np.ones((1, 4, 2, 2, 2))), coeffs)


def test_modulate_batch_mismatch(rng):
    """Test modulation with the wrong batch size."""
    generator = FilmGeneratorParams.initialize(2, rng)
    coeffs = generate_coefficients([TimeVector(0.0, 1.0, 2.0)] * 3, generator)
    with pytest.raises(FilmError):
        modulate(Tensor(np.ones((2, 2, 2, 2, 2))), coeffs)


@pytest.mark.parametrize("w1,gamma,beta", [
    # hidden unit active: h = -0.15 + 0.6 + 0.1 = 0.55
    ([[0.5, -1.0, 2.0]], 1.0 + 0.3 * 0.55 + 0.05, -0.7 * 0.55 + 0.2),
    # hidden unit leaking: h = 0.01 * (0.3 - 0.6 + 0.1) = -0.002
    ([[0.0, 2.0, -2.0]], 1.0 + 0.3 * -0.002 + 0.05, -0.7 * -0.002 + 0.2),
])
def test_single_hidden_unit_generator(w1, gamma, beta):
    """Test a one-unit generator against the two-layer map evaluated by hand."""
    with precision(np.float64):
        generator = FilmGeneratorParams(w1=Tensor(w1), b1=Tensor([0.1]), w2=Tensor([[0.3], [-0.7]]),
                                        b2=Tensor([0.05, 0.2]))
        coeffs = generate_coefficients(TimeVector(0.0, 90.0, 180.0), generator, slope=0.01)
    assert coeffs.gamma.data[0] == pytest.approx(gamma, abs=1e-6)
    assert coeffs.beta.data[0] == pytest.approx(beta, abs=1e-6)


def test_modulate_matches_elementwise_loop(rng):
    """Test modulation against a per-voxel scalar evaluation."""
    x = Tensor(rng.normal(size=(1, 2, 2, 2, 2)))
    gamma, beta = Tensor([2.0, -1.0]), Tensor([0.5, 0.0])
    out = modulate(x, FilmCoefficients(gamma=gamma, beta=beta)).data
    expected = np.empty_like(x.data)
    for index in np.ndindex(*x.shape):
        c = index[1]
        expected[index] = gamma.data[c] * x.data[index] + beta.data[c]
    np.testing.assert_array_equal(out, expected)


def test_modulations_compose(rng):
    """Test that two modulations equal one with multiplied scales and carried shifts."""
    with precision(np.float64):
        x = Tensor(rng.normal(size=(2, 3, 2, 2, 2)))
        g1, b1, g2, b2 = (Tensor(v) for v in rng.normal(size=(4, 3)))
        twice = modulate(modulate(x, FilmCoefficients(g1, b1)), FilmCoefficients(g2, b2))
        once = modulate(x, FilmCoefficients(Tensor(g2.data * g1.data), Tensor(g2.data * b1.data + b2.data)))
    np.testing.assert_allclose(twice.data, once.data, atol=1e-6)
