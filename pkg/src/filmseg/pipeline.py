"""Data preparation: resampling, normalization, phase triplets and patch sampling."""

import json
import logging
import math
import os
from dataclasses import dataclass, replace
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy.ndimage import map_coordinates

from filmseg import FilmSegError
from filmseg.film import TimeVector
from filmseg.phantom import DceStudy, load_study

logger = logging.getLogger(__name__)

PERCENTILE = 99.0
PERCENTILE_METHOD = "linear"
NORMALIZED_CLAMP = 1.5
TARGET_SPACING = (1.0, 1.0, 1.0)
SPLITS = ("train", "val", "test")
MANIFEST_NAME = "manifest.json"


class PipelineError(FilmSegError):
    """Error during data preparation."""
    pass


@dataclass
class Triplet:
    """Three input channels [pre, first post, k-th post] with their times."""
    channels: np.ndarray
    times: TimeVector
    third_phase_index: int


@dataclass
class TrainingSample:
    channels: np.ndarray
    times: TimeVector
    label: np.ndarray
    case_id: str
    third_phase_index: int
    offset: Tuple[int, int, int] = (0, 0, 0)


def normalize_study(study: DceStudy) -> DceStudy:
    """Map the pooled study minimum to 0 and the pooled 99th percentile to 1, clamped to [0, 1.5]."""
    values = study.phases.astype(np.float64)
    low = values.min()
    high = np.percentile(values, PERCENTILE, method=PERCENTILE_METHOD)
    if high <= low:
        raise PipelineError(f"Cannot normalize study {study.case_id}: intensity range is empty")
    normalized = np.clip((values - low) / (high - low), 0.0, NORMALIZED_CLAMP)
    return replace(study, phases=normalized.astype(np.float32), metadata=dict(study.metadata))


def _resampled_shape(shape: Sequence[int], spacing: Sequence[float],
                     target: Sequence[float]) -> Tuple[int, ...]:
    # rounding guards against 0.1 * 3 / 0.3 style float noise before the ceiling
    return tuple(max(1, math.ceil(round(n * s / t, 6))) for n, s, t in zip(shape, spacing, target))


def resample_volume(volume: np.ndarray, spacing: Sequence[float],
                    target_spacing: Sequence[float] = TARGET_SPACING,
                    order: int = 1) -> Tuple[np.ndarray, Tuple[float, float, float]]:
    """Trilinear resampling on a corner-aligned grid (output voxel 0 sits on input voxel 0)."""
    spacing, target = tuple(map(float, spacing)), tuple(map(float, target_spacing))
    if min(spacing) <= 0 or min(target) <= 0:
        raise PipelineError(f"Spacings must be positive, got {spacing} -> {target}")
    if spacing == target:
        return volume.copy(), spacing
    new_shape = _resampled_shape(volume.shape, spacing, target)
    coords = np.meshgrid(*[np.arange(m) * t / s for m, s, t in zip(new_shape, spacing, target)],
                         indexing="ij")
    resampled = map_coordinates(volume.astype(np.float64), coords, order=order, mode="nearest")
    return resampled.astype(volume.dtype), target


def resample_study(study: DceStudy, target_spacing: Sequence[float] = TARGET_SPACING) -> DceStudy:
    """Resample every phase and the mask to ``target_spacing``.

    Phases are interpolated trilinearly; the mask is resampled the same way
    and thresholded at 0.5 so it stays binary. A study already at the target
    spacing is returned unchanged.

    Args:
        study: Study to resample
        target_spacing: Voxel size in mm

    Returns:
        DceStudy: Resampled study with the same times and metadata
    """
    if tuple(map(float, target_spacing)) == study.spacing:
        return study
    phases = np.stack([resample_volume(p, study.spacing, target_spacing)[0] for p in study.phases])
    mask = None
    if study.truth_mask is not None:
        resampled, _ = resample_volume(study.truth_mask.astype(np.float32), study.spacing, target_spacing)
        mask = (resampled >= 0.5).astype(np.uint8)
    return replace(study, phases=phases, spacing=tuple(map(float, target_spacing)), truth_mask=mask)


def prepare_study(study: DceStudy, target_spacing: Sequence[float] = TARGET_SPACING) -> DceStudy:
    """Resample to 1 mm isotropic, then normalize intensities."""
    return normalize_study(resample_study(study, target_spacing))


def build_triplets(study: DceStudy) -> List[Triplet]:
    """One triplet per later phase: channels (phase 0, phase 1, phase k) for k = 2 .. P-1."""
    if study.num_phases < 3:
        raise PipelineError(f"Study {study.case_id} has {study.num_phases} phases; at least 3 are needed")
    t = study.times
    return [
        Triplet(channels=study.phases[[0, 1, k]], times=TimeVector(t[0], t[1], t[k]), third_phase_index=k)
        for k in range(2, study.num_phases)
    ]


def sample_patch(triplet: Triplet, label: np.ndarray, patch_size: Sequence[int],
                 fg_probability: float, rng: np.random.Generator,
                 case_id: str = "") -> TrainingSample:
    """Crop the triplet and label congruently.

    With probability ``fg_probability`` the patch is centred on a random tumor
    voxel (shifted to stay inside the volume); otherwise the crop origin is
    uniform. An empty label falls back to the uniform crop.
    """
    shape = np.array(label.shape)
    patch = np.array(patch_size)
    if len(patch) != 3 or (patch > shape).any() or (patch < 1).any():
        raise PipelineError(f"Patch {tuple(patch)} does not fit volume {tuple(shape)}")
    want_foreground = rng.random() < fg_probability
    foreground = np.argwhere(label) if want_foreground else None
    if foreground is not None and len(foreground):
        center = foreground[rng.integers(len(foreground))]
        start = np.clip(center - patch // 2, 0, shape - patch)
    else:
        start = np.array([rng.integers(0, n - p + 1) for n, p in zip(shape, patch)])
    window = tuple(slice(int(s), int(s + p)) for s, p in zip(start, patch))
    return TrainingSample(
        channels=triplet.channels[(slice(None),) + window].copy(),
        times=triplet.times,
        label=label[window].astype(np.uint8),
        case_id=case_id,
        third_phase_index=triplet.third_phase_index,
        offset=tuple(int(s) for s in start),
    )


@dataclass
class Manifest:
    """Case ids and their split tags; study files live next to the manifest."""
    directory: str
    cases: Dict[str, str]

    def ids(self, split: str) -> List[str]:
        return [case_id for case_id, tag in self.cases.items() if tag == split]

    def load(self, split: str, prepare: bool = True) -> List[DceStudy]:
        studies = [load_study(self.directory, case_id) for case_id in self.ids(split)]
        return [prepare_study(s) for s in studies] if prepare else studies

    def fold(self, index: int, k: int = 2, seed: int = 0) -> "Manifest":
        """Fold ``index`` of a k-fold partition of the train and val cases.

        Test cases keep their tag.

        Raises:
            PipelineError: If ``index`` is not in [0, k) or there are fewer than k cases
        """
        if not 0 <= index < k:
            raise PipelineError(f"Fold index must be in [0, {k}), got {index}")
        pool = [case_id for case_id, tag in self.cases.items() if tag != "test"]
        cases = dict(self.cases)
        cases.update(kfold_splits(pool, k, seed)[index])
        return Manifest(directory=self.directory, cases=cases)


def split_cases(case_ids: Sequence[str], ratios: Sequence[float] = (0.6, 0.2, 0.2),
                seed: int = 0) -> Dict[str, str]:
    """Seeded shuffle into train/val/test by the given ratios."""
    if len(ratios) != 3 or min(ratios) < 0 or not math.isclose(sum(ratios), 1.0):
        raise PipelineError(f"Split ratios must be three non-negative values summing to 1, got {ratios}")
    order = np.random.default_rng(seed).permutation(len(case_ids))
    n_train = int(round(ratios[0] * len(case_ids)))
    n_val = int(round(ratios[1] * len(case_ids)))
    tags = {}
    for rank, index in enumerate(order):
        tag = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
        tags[case_ids[index]] = tag
    return {case_id: tags[case_id] for case_id in case_ids}


def kfold_splits(case_ids: Sequence[str], k: int = 2, seed: int = 0) -> List[Dict[str, str]]:
    """k train/val partitions in which every case is validated exactly once."""
    if k < 2 or k > len(case_ids):
        raise PipelineError(f"Need 2 <= k <= {len(case_ids)} folds, got {k}")
    order = np.random.default_rng(seed).permutation(len(case_ids))
    folds = np.array_split(order, k)
    splits = []
    for fold in folds:
        held_out = {case_ids[i] for i in fold}
        splits.append({c: "val" if c in held_out else "train" for c in case_ids})
    return splits


def write_manifest(directory: str, cases: Dict[str, str], name: str = MANIFEST_NAME) -> str:
    """Write the split manifest next to the studies.

    Args:
        directory: Dataset directory
        cases: Case id to split tag
        name: Manifest file name

    Returns:
        str: Path of the written manifest

    Raises:
        PipelineError: If a tag is not train, val or test
    """
    unknown = set(cases.values()) - set(SPLITS)
    if unknown:
        raise PipelineError(f"Unknown split tags {sorted(unknown)}")
    path = os.path.join(directory, name)
    with open(path, "w") as f:
        json.dump([{"case_id": c, "split": s} for c, s in cases.items()], f, indent=2)
    return path


def read_manifest(path: str) -> Manifest:
    """Read a manifest; studies are looked up in the manifest's directory.

    Raises:
        PipelineError: If the file is missing or malformed
    """
    try:
        with open(path) as f:
            entries = json.load(f)
        cases = {entry["case_id"]: entry["split"] for entry in entries}
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise PipelineError(f"Cannot read manifest {path}: {e}")
    return Manifest(directory=os.path.dirname(os.path.abspath(path)), cases=cases)


def canonical_triplet(study: DceStudy, index: int = 0) -> Triplet:
    """Inference input; index 0 is [pre, first post, second post]."""
    triplets = build_triplets(study)
    if not 0 <= index < len(triplets):
        raise PipelineError(f"Study {study.case_id} has {len(triplets)} triplets, requested {index}")
    return triplets[index]
