"""Evaluation of checkpoints on manifest splits and cross-placement comparison."""

import csv
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from filmseg.metrics import (CaseMetrics, Comparison, MetricsError, MetricsReport, SegmentationMask,
                             TTestResult, dice, hd95, paired_ttest, significance_marker)
from filmseg.pipeline import Manifest
from filmseg.unet import Checkpoint, load_checkpoint, predict_mask

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ("case_id", "dice", "hd95_mm")

# Comparison cohorts: the training dataset's own split and an estimated-schedule dataset
IN_DOMAIN = "in_domain"
OUT_OF_DOMAIN = "out_of_domain"

COMPARISON_COLUMNS = ("cohort", "placement", "seeds", "dice_mean", "dice_sd", "dice10_mean", "hd95_mean",
                      "hd95_sd", "t_statistic", "p_value", "significant")


def evaluate_model(checkpoint: Union[str, Checkpoint], manifest: Manifest, split: str = "test",
                   patch_size: Optional[Sequence[int]] = None, overlap: float = 0.5,
                   triplet_index: int = 0, name: Optional[str] = None,
                   progress: bool = False) -> MetricsReport:
    """Segment every case of ``split`` and score it against its truth mask."""
    if isinstance(checkpoint, str):
        checkpoint = load_checkpoint(checkpoint)
    model = checkpoint.model
    studies = manifest.load(split)
    if not studies:
        raise MetricsError(f"The {split} split is empty")
    report = MetricsReport(model=name or model.config.placement.value)
    for study in tqdm(studies, desc=f"evaluate {report.model}", disable=not progress):
        if study.truth_mask is None:
            raise MetricsError(f"Case {study.case_id} has no truth mask")
        truth = SegmentationMask(study.truth_mask, study.spacing)
        predicted = predict_mask(model, study, patch_size=patch_size, overlap=overlap,
                                 triplet_index=triplet_index)
        case = CaseMetrics(case_id=study.case_id, dice=dice(predicted, truth), hd95_mm=hd95(predicted, truth))
        logger.debug("%s: dice %.4f hd95 %s", case.case_id, case.dice, case.hd95_mm)
        report.per_case.append(case)
    logger.info("%s on %s: mean dice %.4f over %d cases", report.model, split, report.mean_dice,
                len(report.per_case))
    return report


def summary_rows(report: MetricsReport) -> List[Tuple[str, str]]:
    mean_hd95 = report.mean_hd95
    return [
        ("mean_dice", repr(report.mean_dice)),
        ("dice10", repr(report.dice10)),
        ("mean_hd95_mm", "" if mean_hd95 is None else repr(mean_hd95)),
        ("undefined_hd95", str(report.undefined_hd95)),
    ]


def write_report_csv(report: MetricsReport, path: str) -> None:
    """Per-case rows, a blank line, then the summary block (metric, value)."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(REPORT_COLUMNS)
        for case in report.per_case:
            writer.writerow([case.case_id, repr(case.dice), "" if case.hd95_mm is None else repr(case.hd95_mm)])
        writer.writerow([])
        writer.writerow(("metric", "value"))
        writer.writerows(summary_rows(report))


def read_report_csv(path: str, model: str = "") -> MetricsReport:
    """Per-case rows of a report CSV; the summary block is recomputed, not read."""
    report = MetricsReport(model=model)
    with open(path, newline="") as f:
        rows = csv.reader(f)
        next(rows)
        for row in rows:
            if not row:
                break
            case_id, dice_value, hd95_value = row
            report.per_case.append(CaseMetrics(case_id, float(dice_value),
                                               float(hd95_value) if hd95_value else None))
    return report


def _mean_sd(values: Sequence[float]) -> Tuple[Optional[float], Optional[float]]:
    if not values:
        return None, None
    sd = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
    return float(np.mean(values)), sd


def seed_averaged_dice(reports: Sequence[MetricsReport]) -> Dict[str, float]:
    """Per-case Dice averaged over the seeds in which the case was evaluated."""
    collected: Dict[str, List[float]] = {}
    for report in reports:
        for case in report.per_case:
            collected.setdefault(case.case_id, []).append(case.dice)
    return {case_id: float(np.mean(scores)) for case_id, scores in collected.items()}


@dataclass
class ComparisonRow:
    placement: str
    seeds: int
    dice_mean: float
    dice_sd: float
    dice10_mean: float
    hd95_mean: Optional[float]
    hd95_sd: Optional[float]
    ttest: Optional[TTestResult] = None
    cohort: str = IN_DOMAIN

    @property
    def marker(self) -> str:
        return significance_marker(self.ttest)


def compare_placements(reports: Dict[str, Sequence[MetricsReport]],
                       baseline: str = "none",
                       cohort: str = IN_DOMAIN) -> Tuple[List[ComparisonRow], List[Comparison]]:
    """Aggregate per-seed reports and t-test each placement against the baseline.

    Seeds contribute one mean Dice each to mean ± sd. The paired test runs on
    per-case Dice averaged across seeds, pairing cases by id.
    """
    rows, comparisons = [], []
    baseline_cases = seed_averaged_dice(reports[baseline]) if baseline in reports else None
    for placement, seed_reports in reports.items():
        if not seed_reports:
            raise MetricsError(f"No reports for placement {placement}")
        dice_mean, dice_sd = _mean_sd([r.mean_dice for r in seed_reports])
        hd95_mean, hd95_sd = _mean_sd([r.mean_hd95 for r in seed_reports if r.mean_hd95 is not None])
        row = ComparisonRow(placement=placement, seeds=len(seed_reports), dice_mean=dice_mean, dice_sd=dice_sd,
                            dice10_mean=float(np.mean([r.dice10 for r in seed_reports])),
                            hd95_mean=hd95_mean, hd95_sd=hd95_sd, cohort=cohort)
        if baseline_cases is not None and placement != baseline:
            cases = seed_averaged_dice(seed_reports)
            shared = sorted(set(cases) & set(baseline_cases))
            if len(shared) >= 2:
                row.ttest = paired_ttest([cases[c] for c in shared], [baseline_cases[c] for c in shared])
                comparisons.append(Comparison(placement, baseline, "dice", row.ttest))
        rows.append(row)
    return rows, comparisons


def _optional(value: Optional[float]) -> str:
    return "" if value is None else repr(value)


def write_comparison_csv(rows: Sequence[ComparisonRow], path: str) -> None:
    """Write comparison rows, one per cohort and placement.

    Args:
        rows: Rows from :func:`compare_placements`, possibly for several cohorts
        path: Destination CSV; optional values are written as empty fields
    """
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(COMPARISON_COLUMNS)
        for row in rows:
            writer.writerow([
                row.cohort, row.placement, row.seeds, repr(row.dice_mean), repr(row.dice_sd),
                repr(row.dice10_mean), _optional(row.hd95_mean), _optional(row.hd95_sd),
                "" if row.ttest is None else repr(row.ttest.statistic),
                "" if row.ttest is None else repr(row.ttest.pvalue),
                row.marker,
            ])


def format_mean_sd(mean: Optional[float], sd: Optional[float], digits: int = 3) -> str:
    if mean is None:
        return "n/a"
    return f"{mean:.{digits}f} ± {sd:.{digits}f}"
