"""Segmentation metrics and paired statistical comparison."""

import math
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import binary_erosion, distance_transform_edt, generate_binary_structure
from scipy.special import betainc

from filmseg import FilmSegError

PERCENTILE_METHOD = "linear"
DICE_TAIL_PERCENTILE = 10.0
HAUSDORFF_PERCENTILE = 95.0
ALPHA = 0.05

# 6-connected face neighbourhood
FACE_NEIGHBOURS = generate_binary_structure(3, 1)


class MetricsError(FilmSegError):
    """Error raised for incompatible masks or invalid metric inputs."""
    pass


@dataclass
class SegmentationMask:
    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise MetricsError(f"Masks are 3D volumes, got shape {self.data.shape}")
        if not np.isin(self.data, (0, 1)).all():
            raise MetricsError("Mask values must be 0 or 1")
        self.data = self.data.astype(np.uint8)
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def is_empty(self) -> bool:
        return not self.data.any()

    def voxel_count(self) -> int:
        return int(self.data.sum())


def _check_compatible(a: SegmentationMask, b: SegmentationMask) -> None:
    if a.data.shape != b.data.shape:
        raise MetricsError(f"Mask shapes differ: {a.data.shape} vs {b.data.shape}")
    if a.spacing != b.spacing:
        raise MetricsError(f"Mask spacings differ: {a.spacing} vs {b.spacing}")


def dice(a: SegmentationMask, b: SegmentationMask) -> float:
    """2|A∩B| / (|A|+|B|); two empty masks agree perfectly (1.0)."""
    _check_compatible(a, b)
    size = a.voxel_count() + b.voxel_count()
    if size == 0:
        return 1.0
    overlap = int(np.logical_and(a.data, b.data).sum())
    return 2.0 * overlap / size


def dice10(scores: Sequence[float]) -> float:
    """10th percentile of per-case Dice scores (linear interpolation)."""
    if len(scores) == 0:
        raise MetricsError("dice10 needs at least one score")
    return float(np.percentile(np.asarray(scores, dtype=np.float64), DICE_TAIL_PERCENTILE,
                               method=PERCENTILE_METHOD))


def surface(mask: SegmentationMask) -> np.ndarray:
    """Foreground voxels with a background face neighbour or on the volume border."""
    foreground = mask.data.astype(bool)
    interior = binary_erosion(foreground, structure=FACE_NEIGHBOURS, border_value=0)
    return foreground & ~interior


def surface_distances(a: SegmentationMask, b: SegmentationMask) -> np.ndarray:
    """Distances in mm from every surface voxel of ``a`` to the nearest surface voxel of ``b``."""
    to_b = distance_transform_edt(~surface(b), sampling=b.spacing)
    return to_b[surface(a)]


def hd95(a: SegmentationMask, b: SegmentationMask) -> Optional[float]:
    """95th percentile of the pooled symmetric surface distances; None if either mask is empty."""
    _check_compatible(a, b)
    if a.is_empty or b.is_empty:
        return None
    pooled = np.concatenate([surface_distances(a, b), surface_distances(b, a)])
    return float(np.percentile(pooled, HAUSDORFF_PERCENTILE, method=PERCENTILE_METHOD))


class TTestResult(NamedTuple):
    statistic: float
    pvalue: float
    degenerate_variance: bool = False

    @property
    def significant(self) -> bool:
        return self.pvalue < ALPHA


def two_tailed_pvalue(t: float, df: int) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    return float(betainc(df / 2.0, 0.5, df / (df + t * t)))


def paired_ttest(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Two-sided paired t-test of ``a`` against ``b``.

    Zero differences (or a zero mean difference) give t = 0, p = 1. Constant
    non-zero differences give an infinite t with p = 0 and flag the result
    as degenerate.

    Args:
        a: First sample
        b: Second sample, paired with ``a`` by position

    Returns:
        TTestResult: Statistic and p-value with n - 1 degrees of freedom

    Raises:
        MetricsError: If the samples differ in length or hold fewer than 2 pairs
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise MetricsError(f"Paired samples must be equal-length lists, got {a.shape} and {b.shape}")
    n = a.size
    if n < 2:
        raise MetricsError(f"A paired t-test needs at least 2 pairs, got {n}")
    d = a - b
    mean = d.mean()
    if not d.any() or mean == 0:
        return TTestResult(0.0, 1.0)
    sd = d.std(ddof=1)
    if sd == 0:
        return TTestResult(math.copysign(math.inf, mean), 0.0, degenerate_variance=True)
    t = float(mean / (sd / math.sqrt(n)))
    return TTestResult(t, two_tailed_pvalue(t, n - 1))


def significance_marker(result: Optional[TTestResult]) -> str:
    return "*" if result is not None and result.significant else ""


@dataclass
class CaseMetrics:
    case_id: str
    dice: float
    hd95_mm: Optional[float]


@dataclass
class Comparison:
    model_a: str
    model_b: str
    metric: str
    result: TTestResult

    @property
    def significant(self) -> bool:
        return self.result.significant


@dataclass
class MetricsReport:
    """Per-case scores of one model with their aggregates.

    Cases whose HD95 is undefined are excluded from ``mean_hd95`` and counted
    in ``undefined_hd95``.
    """
    model: str
    per_case: List[CaseMetrics] = field(default_factory=list)
    comparisons: List[Comparison] = field(default_factory=list)

    def dice_scores(self) -> List[float]:
        return [c.dice for c in self.per_case]

    def hd95_values(self) -> List[float]:
        return [c.hd95_mm for c in self.per_case if c.hd95_mm is not None]

    @property
    def mean_dice(self) -> float:
        if not self.per_case:
            raise MetricsError(f"Report for {self.model} has no cases")
        return float(np.mean(self.dice_scores()))

    @property
    def dice10(self) -> float:
        return dice10(self.dice_scores())

    @property
    def mean_hd95(self) -> Optional[float]:
        values = self.hd95_values()
        return float(np.mean(values)) if values else None

    @property
    def undefined_hd95(self) -> int:
        return len(self.per_case) - len(self.hd95_values())
