"""Tests for the metrics module."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from filmseg.metrics import (MetricsError, MetricsReport, CaseMetrics, SegmentationMask, dice, dice10, hd95,
                             paired_ttest, significance_marker, surface, two_tailed_pvalue)


def _mask(data, spacing=(1.0, 1.0, 1.0)):
    return SegmentationMask(np.asarray(data, dtype=np.uint8), spacing)


def _random_pair(seed, size=8):
    rng = np.random.default_rng(seed)
    a = rng.random((size,) * 3) < 0.3
    b = rng.random((size,) * 3) < 0.3
    return _mask(a), _mask(b)


def brute_force_surface(data):
    data = data.astype(bool)
    points = []
    for index in itertools.product(*(range(n) for n in data.shape)):
        if not data[index]:
            continue
        for axis in range(3):
            for step in (-1, 1):
                neighbour = list(index)
                neighbour[axis] += step
                if not 0 <= neighbour[axis] < data.shape[axis] or not data[tuple(neighbour)]:
                    points.append(index)
                    break
            else:
                continue
            break
    return np.array(points, dtype=np.float64)


def brute_force_hd95(a, b):
    pa = brute_force_surface(a.data) * np.array(a.spacing)
    pb = brute_force_surface(b.data) * np.array(b.spacing)
    distances = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(axis=-1))
    pooled = np.concatenate([distances.min(axis=1), distances.min(axis=0)])
    return float(np.percentile(pooled, 95, method="linear"))


def brute_force_dice(a, b):
    inter = sum(1 for x, y in zip(a.data.ravel(), b.data.ravel()) if x and y)
    total = int(a.data.sum() + b.data.sum())
    return 1.0 if total == 0 else 2 * inter / total


def test_mask_values_must_be_binary():
    """Test mask validation."""
    with pytest.raises(MetricsError):
        SegmentationMask(np.full((2, 2, 2), 2))


def test_dice_examples():
    """Test Dice on small masks."""
    a = np.zeros((4, 4, 4))
    b = np.zeros((4, 4, 4))
    assert dice(_mask(a), _mask(b)) == 1.0
    a.flat[:4] = 1
    b.flat[1:7] = 1
    assert dice(_mask(a), _mask(b)) == pytest.approx(0.6)
    assert dice(_mask(a), _mask(a)) == 1.0
    c = np.zeros((4, 4, 4))
    c.flat[-3:] = 1
    assert dice(_mask(a), _mask(c)) == 0.0


def test_dice_shape_mismatch():
    """Test Dice on masks of different shapes."""
    with pytest.raises(MetricsError):
        dice(_mask(np.zeros((2, 2, 2))), _mask(np.zeros((2, 2, 3))))


def test_dice10_examples():
    """Test Dice10 on small score lists."""
    assert dice10([0.7] * 5) == pytest.approx(0.7)
    assert dice10([0.0, 1.0]) == pytest.approx(0.1)
    with pytest.raises(MetricsError):
        dice10([])


@given(st.lists(st.floats(0, 1), min_size=1, max_size=100))
@settings(deadline=None)
def test_dice10_rank_property(scores):
    """Test that Dice10 is the mean of the lowest decile."""
    threshold = dice10(scores)
    assert sum(s >= threshold for s in scores) >= 0.9 * len(scores) - 1


def test_dice10_on_hundred_distinct_scores():
    """Test Dice10 over one hundred cases."""
    scores = list(np.linspace(0.0, 0.99, 100))
    threshold = dice10(scores)
    assert sum(s >= threshold for s in scores) >= 90


def test_hd95_identical_and_two_points():
    """Test HD95 on identical masks and on two single voxels."""
    a = np.zeros((8, 8, 8))
    a[2, 3, 3] = 1
    b = np.zeros((8, 8, 8))
    b[5, 3, 3] = 1
    assert hd95(_mask(a), _mask(a)) == 0.0
    assert hd95(_mask(a), _mask(b)) == pytest.approx(3.0)


def test_hd95_undefined_for_empty_mask():
    """Test HD95 when a mask is empty."""
    a = np.zeros((4, 4, 4))
    b = np.zeros((4, 4, 4))
    b[1, 1, 1] = 1
    assert hd95(_mask(a), _mask(b)) is None
    assert hd95(_mask(b), _mask(a)) is None


def test_surface_of_solid_cube():
    """Test surface extraction of a cube."""
    cube = np.zeros((5, 5, 5))
    cube[1:4, 1:4, 1:4] = 1
    shell = surface(_mask(cube))
    assert shell.sum() == 26
    assert not shell[2, 2, 2]


def test_border_voxels_are_surface():
    """Test that voxels on the volume border are surface."""
    full = np.ones((3, 3, 3))
    assert surface(_mask(full)).sum() == 26


@pytest.mark.parametrize("seed", range(20))
def test_metrics_match_brute_force(seed):
    """Test Dice and HD95 against direct computation."""
    a, b = _random_pair(seed)
    assert dice(a, b) == pytest.approx(brute_force_dice(a, b), abs=1e-12)
    assert hd95(a, b) == pytest.approx(brute_force_hd95(a, b), abs=1e-9)


def test_hd95_anisotropic_matches_brute_force():
    """Test HD95 with anisotropic spacing."""
    a, b = _random_pair(99)
    a = _mask(a.data, (0.7, 1.0, 2.5))
    b = _mask(b.data, (0.7, 1.0, 2.5))
    assert hd95(a, b) == pytest.approx(brute_force_hd95(a, b), abs=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_metric_symmetry(seed):
    """Test that Dice and HD95 are symmetric."""
    a, b = _random_pair(seed)
    assert dice(a, b) == dice(b, a)
    assert hd95(a, b) == pytest.approx(hd95(b, a), abs=1e-12)


def test_translation_invariance():
    """Test that translating both masks keeps the metrics."""
    a = np.zeros((12, 12, 12))
    b = np.zeros((12, 12, 12))
    a[2:5, 2:6, 3:5] = 1
    b[3:6, 2:5, 2:5] = 1
    shifted_a = np.roll(a, (3, 2, 4), axis=(0, 1, 2))
    shifted_b = np.roll(b, (3, 2, 4), axis=(0, 1, 2))
    assert dice(_mask(a), _mask(b)) == dice(_mask(shifted_a), _mask(shifted_b))
    assert hd95(_mask(a), _mask(b)) == pytest.approx(hd95(_mask(shifted_a), _mask(shifted_b)), abs=1e-12)


def test_spacing_scales_hd95():
    """Test that HD95 scales with the voxel spacing."""
    a, b = _random_pair(3)
    scaled_a, scaled_b = _mask(a.data, (2.0, 2.0, 2.0)), _mask(b.data, (2.0, 2.0, 2.0))
    assert hd95(scaled_a, scaled_b) == pytest.approx(2.0 * hd95(a, b), abs=1e-12)
    assert dice(scaled_a, scaled_b) == dice(a, b)


def test_ttest_identical_samples():
    """Test the t-test on identical samples."""
    result = paired_ttest([0.5, 0.6, 0.7], [0.5, 0.6, 0.7])
    assert result.statistic == 0.0
    assert result.pvalue == 1.0


def test_ttest_zero_mean_differences():
    """Test the t-test when differences cancel out."""
    result = paired_ttest([1.0, 0.0, 1.0, 0.0], [0.0, 1.0, 0.0, 1.0])
    assert result.statistic == 0.0
    assert result.pvalue == pytest.approx(1.0)


def test_ttest_degenerate_variance():
    """Test the t-test on constant differences."""
    result = paired_ttest([1.0, 2.0, 3.0], [0.5, 1.5, 2.5])
    assert result.degenerate_variance
    assert result.pvalue == 0.0


def test_ttest_requires_two_pairs():
    """Test the t-test with a single pair."""
    with pytest.raises(MetricsError):
        paired_ttest([1.0], [2.0])
    with pytest.raises(MetricsError):
        paired_ttest([1.0, 2.0], [2.0])


def test_critical_value_df9():
    """Test the two-sided 5% critical value for 9 degrees of freedom."""
    assert two_tailed_pvalue(2.262, 9) == pytest.approx(0.050, abs=1e-3)


@pytest.mark.parametrize("t,df", [(0.5, 3), (1.7, 12), (-2.9, 5), (4.2, 30)])
def test_pvalue_matches_student_t(t, df):
    """Test p-values against the Student t distribution."""
    assert two_tailed_pvalue(t, df) == pytest.approx(2 * stats.t.sf(abs(t), df), abs=1e-6)


def test_ttest_matches_scipy(rng):
    """Test the t-test against scipy."""
    a = rng.normal(0.7, 0.1, size=12)
    b = a - rng.normal(0.03, 0.05, size=12)
    ours = paired_ttest(a, b)
    reference = stats.ttest_rel(a, b)
    assert ours.statistic == pytest.approx(reference.statistic, rel=1e-9)
    assert ours.pvalue == pytest.approx(reference.pvalue, abs=1e-6)


def test_ttest_antisymmetry(rng):
    """Test that swapping samples negates the statistic."""
    a, b = rng.random(8), rng.random(8)
    forward, reverse = paired_ttest(a, b), paired_ttest(b, a)
    assert forward.statistic == -reverse.statistic
    assert forward.pvalue == reverse.pvalue


def test_significance_marker():
    """Test the significance marker."""
    assert significance_marker(paired_ttest([1.0, 2.0, 3.0], [0.5, 1.5, 2.5])) == "*"
    assert significance_marker(paired_ttest([0.5, 0.6, 0.7], [0.5, 0.6, 0.7])) == ""
    assert significance_marker(None) == ""


def test_report_aggregates():
    """Test report summary values."""
    report = MetricsReport(model="all", per_case=[
        CaseMetrics("a", 1.0, 0.0), CaseMetrics("b", 0.0, None), CaseMetrics("c", 0.5, 4.0)])
    assert report.mean_dice == pytest.approx(0.5)
    assert report.mean_hd95 == pytest.approx(2.0)
    assert report.undefined_hd95 == 1
    assert report.dice10 == pytest.approx(0.1)
