"""Synthetic DCE studies with parameterized enhancement kinetics.

Each study is a smooth fat background with an embedded benign parenchyma
region, benign enhancing foci and tumor ellipsoids. Tumors wash in fast and
wash out late; benign tissue enhances slowly and persistently, so the
time course, not the shape, tells them apart.
"""

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import binary_dilation, gaussian_filter

from filmseg import FilmSegError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1

BACKGROUND = "background"
BENIGN = "benign"
TUMOR = "tumor"
TISSUES = (BACKGROUND, BENIGN, TUMOR)

MAX_PLACEMENT_RETRIES = 200


class PhantomError(FilmSegError):
    """Error during phantom generation or study I/O."""
    pass


@dataclass(frozen=True)
class KineticParams:
    """Wash-in / wash-out enhancement parameters of one tissue class."""
    amplitude: float
    uptake_rate: float
    washout_rate: float = 0.0

    def __post_init__(self):
        if self.amplitude < 0 or self.uptake_rate <= 0 or self.washout_rate < 0:
            raise PhantomError(
                f"Invalid kinetics: amplitude={self.amplitude}, uptake={self.uptake_rate}, "
                f"washout={self.washout_rate}")

    def peak_time(self) -> float:
        """Time of maximum enhancement; infinite for persistent tissue."""
        if self.washout_rate == 0:
            return math.inf
        return math.log1p(self.uptake_rate / self.washout_rate) / self.uptake_rate

    def jittered(self, rng: np.random.Generator, sigma: float) -> "KineticParams":
        """Multiply every rate and the amplitude by an independent log-normal factor."""
        if sigma <= 0:
            return self
        factors = np.exp(rng.normal(0.0, sigma, size=3))
        return KineticParams(
            amplitude=self.amplitude * float(factors[0]),
            uptake_rate=self.uptake_rate * float(factors[1]),
            washout_rate=self.washout_rate * float(factors[2]),
        )


DEFAULT_TISSUE_PARAMS: Dict[str, KineticParams] = {
    TUMOR: KineticParams(amplitude=1.0, uptake_rate=0.05, washout_rate=0.002),
    BENIGN: KineticParams(amplitude=0.7, uptake_rate=0.008, washout_rate=0.0),
    BACKGROUND: KineticParams(amplitude=0.05, uptake_rate=0.005, washout_rate=0.0),
}

# Pre-contrast intensity per tissue; the background also carries a smooth field.
DEFAULT_BASELINES: Dict[str, float] = {
    BACKGROUND: 0.30,
    BENIGN: 0.20,
    TUMOR: 0.15,
}


def enhancement_curve(params: KineticParams, t: float) -> float:
    """E(t) = amplitude * (1 - exp(-uptake * t)) * exp(-washout * t)."""
    if t < 0:
        raise PhantomError(f"Enhancement is defined for t >= 0, got {t}")
    return params.amplitude * -math.expm1(-params.uptake_rate * t) * math.exp(-params.washout_rate * t)


@dataclass
class PhantomSpec:
    """Geometry, schedule and tissue description of one synthetic study."""
    volume_size: Tuple[int, int, int] = (48, 48, 48)
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    num_lesions: int = 1
    num_benign_foci: int = 2
    lesion_radius_range: Tuple[float, float] = (4.0, 8.0)
    acquisition_schedule: Tuple[float, ...] = (0.0, 90.0, 180.0, 270.0, 360.0)
    noise_sigma: float = 0.02
    tissue_params: Dict[str, KineticParams] = field(default_factory=lambda: dict(DEFAULT_TISSUE_PARAMS))
    baselines: Dict[str, float] = field(default_factory=lambda: dict(DEFAULT_BASELINES))
    parenchyma_fraction: float = 0.3
    background_smoothness: float = 6.0
    seed: int = 0

    def validate(self) -> None:
        schedule = list(self.acquisition_schedule)
        if len(schedule) < 3:
            raise PhantomError(f"Schedule needs at least 3 phases, got {len(schedule)}")
        if schedule[0] != 0:
            raise PhantomError(f"Schedule must start at 0 s, got {schedule[0]}")
        if any(b <= a for a, b in zip(schedule, schedule[1:])):
            raise PhantomError(f"Schedule must be strictly increasing, got {schedule}")
        if len(self.volume_size) != 3 or min(self.volume_size) < 1:
            raise PhantomError(f"Invalid volume size {self.volume_size}")
        if min(self.spacing) <= 0:
            raise PhantomError(f"Spacing must be positive, got {self.spacing}")
        if self.num_lesions < 0 or self.num_benign_foci < 0:
            raise PhantomError("Lesion counts must be non-negative")
        low, high = self.lesion_radius_range
        if not 0 < low <= high:
            raise PhantomError(f"Invalid lesion radius range {self.lesion_radius_range}")
        extent = min(n * s for n, s in zip(self.volume_size, self.spacing))
        if self.num_lesions + self.num_benign_foci and 2 * high >= extent:
            raise PhantomError(f"Lesion radius {high} mm does not fit a {extent} mm volume")
        if self.noise_sigma < 0:
            raise PhantomError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        missing = set(TISSUES) - set(self.tissue_params) | set(TISSUES) - set(self.baselines)
        if missing:
            raise PhantomError(f"Missing tissue description for {sorted(missing)}")


@dataclass
class DceStudy:
    """A 4D dynamic study: phases stacked as P x D x H x W."""
    phases: np.ndarray
    times: Tuple[float, ...]
    spacing: Tuple[float, float, float]
    truth_mask: Optional[np.ndarray] = None
    case_id: str = "case"
    metadata: Dict = field(default_factory=dict)

    def __post_init__(self):
        self.phases = np.asarray(self.phases, dtype=np.float32)
        self.times = tuple(float(t) for t in self.times)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.phases.ndim != 4:
            raise PhantomError(f"Phases must be P x D x H x W, got shape {self.phases.shape}")
        if len(self.times) != self.phases.shape[0]:
            raise PhantomError(f"{self.phases.shape[0]} phases but {len(self.times)} times")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise PhantomError(f"Times must be strictly increasing, got {self.times}")
        if self.truth_mask is not None:
            self.truth_mask = np.asarray(self.truth_mask, dtype=np.uint8)
            if self.truth_mask.shape != self.shape:
                raise PhantomError(f"Mask shape {self.truth_mask.shape} differs from volume {self.shape}")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.phases.shape[1:])

    @property
    def num_phases(self) -> int:
        return self.phases.shape[0]


def _ellipsoid(shape: Sequence[int], spacing: Sequence[float], center_mm, radii_mm) -> np.ndarray:
    grids = np.meshgrid(*[np.arange(n) * s for n, s in zip(shape, spacing)], indexing="ij")
    distance = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center_mm, radii_mm))
    return distance <= 1.0


def _place_ellipsoids(spec: PhantomSpec, count: int, occupied: np.ndarray,
                      rng: np.random.Generator, kind: str) -> List[np.ndarray]:
    extent = np.array(spec.volume_size) * np.array(spec.spacing)
    low, high = spec.lesion_radius_range
    # one voxel of clearance between neighbouring lesions
    footprint = np.ones((3, 3, 3), dtype=bool)
    placed = []
    for index in range(count):
        for _ in range(MAX_PLACEMENT_RETRIES):
            radii = rng.uniform(low, high, size=3)
            center = rng.uniform(radii, extent - radii)
            candidate = _ellipsoid(spec.volume_size, spec.spacing, center, radii)
            if not candidate.any():
                continue
            if not (binary_dilation(candidate, structure=footprint) & occupied).any():
                occupied |= candidate
                placed.append(candidate)
                break
        else:
            raise PhantomError(
                f"Could not place {kind} {index + 1} of {count} without overlap after "
                f"{MAX_PLACEMENT_RETRIES} attempts")
    return placed


def generate_study(spec: PhantomSpec, case_id: str = "case") -> DceStudy:
    """Render one study deterministically from ``spec.seed``."""
    spec.validate()
    geometry_seq, noise_seq = np.random.SeedSequence(spec.seed).spawn(2)
    geometry = np.random.default_rng(geometry_seq)
    noise = np.random.default_rng(noise_seq)
    shape = tuple(spec.volume_size)

    labels = np.zeros(shape, dtype=np.uint8)
    extent = np.array(shape) * np.array(spec.spacing)
    parenchyma_radii = extent * spec.parenchyma_fraction * geometry.uniform(0.85, 1.15, size=3)
    parenchyma_center = extent / 2 + geometry.uniform(-0.05, 0.05, size=3) * extent
    labels[_ellipsoid(shape, spec.spacing, parenchyma_center, parenchyma_radii)] = TISSUES.index(BENIGN)

    occupied = np.zeros(shape, dtype=bool)
    tumors = _place_ellipsoids(spec, spec.num_lesions, occupied, geometry, "lesion")
    foci = _place_ellipsoids(spec, spec.num_benign_foci, occupied, geometry, "benign focus")
    for focus in foci:
        labels[focus] = TISSUES.index(BENIGN)
    truth = np.zeros(shape, dtype=np.uint8)
    for tumor in tumors:
        labels[tumor] = TISSUES.index(TUMOR)
        truth[tumor] = 1

    field_noise = gaussian_filter(geometry.normal(size=shape), sigma=spec.background_smoothness)
    field_noise /= max(field_noise.std(), 1e-12)
    baseline = np.empty(shape, dtype=np.float64)
    for index, tissue in enumerate(TISSUES):
        baseline[labels == index] = spec.baselines[tissue]
    is_background = labels == TISSUES.index(BACKGROUND)
    baseline[is_background] += 0.05 * spec.baselines[BACKGROUND] * field_noise[is_background]

    phases = np.empty((len(spec.acquisition_schedule),) + shape, dtype=np.float32)
    for k, t in enumerate(spec.acquisition_schedule):
        enhancement = np.zeros(shape, dtype=np.float64)
        for index, tissue in enumerate(TISSUES):
            enhancement[labels == index] = enhancement_curve(spec.tissue_params[tissue], t)
        signal = baseline + enhancement
        if spec.noise_sigma > 0:
            signal = signal + noise.normal(0.0, spec.noise_sigma, size=shape)
        phases[k] = signal

    metadata = {
        "tissues": {name: asdict(params) for name, params in spec.tissue_params.items()},
        "baselines": dict(spec.baselines),
        "seed": int(spec.seed),
    }
    return DceStudy(phases=phases, times=tuple(spec.acquisition_schedule), spacing=tuple(spec.spacing),
                    truth_mask=truth, case_id=case_id, metadata=metadata)


@dataclass
class SchedulePolicy:
    """Per-case randomization of acquisition schedules and kinetics.

    ``estimated_step`` records the times as 0, step, 2*step, ... while the
    study is rendered with the sampled true times, imitating cohorts whose
    timing is only known approximately.
    """
    enabled: bool = True
    min_phases: int = 3
    max_phases: int = 6
    first_post_range: Tuple[float, float] = (30.0, 480.0)
    interval_range: Tuple[float, float] = (60.0, 240.0)
    kinetic_jitter: float = 0.15
    estimated_step: Optional[float] = None

    def sample_schedule(self, rng: np.random.Generator) -> Tuple[float, ...]:
        count = int(rng.integers(self.min_phases, self.max_phases + 1))
        times = [0.0, float(rng.uniform(*self.first_post_range))]
        while len(times) < count:
            times.append(times[-1] + float(rng.uniform(*self.interval_range)))
        return tuple(round(t, 1) for t in times)


def _case_study(template: PhantomSpec, policy: SchedulePolicy, index: int,
                seq: np.random.SeedSequence) -> DceStudy:
    rng = np.random.default_rng(seq)
    schedule = policy.sample_schedule(rng) if policy.enabled else tuple(template.acquisition_schedule)
    tissues = {name: params.jittered(rng, policy.kinetic_jitter)
               for name, params in template.tissue_params.items()}
    spec = replace(template, acquisition_schedule=schedule, tissue_params=tissues,
                   seed=int(rng.integers(2 ** 63)))
    study = generate_study(spec, case_id=f"case_{index:04d}")
    if policy.estimated_step:
        study.metadata["true_times"] = list(study.times)
        study.times = tuple(policy.estimated_step * k for k in range(study.num_phases))
    return study


def generate_dataset(template: PhantomSpec, count: int, policy: Optional[SchedulePolicy] = None,
                     seed: int = 0, workers: int = 1) -> List[DceStudy]:
    """Generate ``count`` studies with per-case schedules, geometry and kinetic jitter."""
    if count < 1:
        raise PhantomError(f"count must be >= 1, got {count}")
    policy = policy or SchedulePolicy()
    seqs = np.random.SeedSequence(seed).spawn(count)
    logger.info("Generating %d phantom studies (seed %d)", count, seed)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return list(pool.map(lambda args: _case_study(template, policy, *args), enumerate(seqs)))


def save_study(study: DceStudy, directory: str) -> str:
    """Write <case_id>.json, <case_id>.raw and (if present) <case_id>.mask; return the JSON path."""
    os.makedirs(directory, exist_ok=True)
    base = os.path.join(directory, study.case_id)
    sidecar = {
        "format_version": FORMAT_VERSION,
        "case_id": study.case_id,
        "shape": list(study.shape),
        "num_phases": study.num_phases,
        "spacing_mm": list(study.spacing),
        "times_s": list(study.times),
        "has_mask": study.truth_mask is not None,
        "metadata": study.metadata,
    }
    with open(base + ".json", "w") as f:
        json.dump(sidecar, f, indent=2)
    with open(base + ".raw", "wb") as f:
        f.write(study.phases.astype("<f4").tobytes())
    if study.truth_mask is not None:
        with open(base + ".mask", "wb") as f:
            f.write(study.truth_mask.astype(np.uint8).tobytes())
    return base + ".json"


def _read_blob(path: str, dtype, expected: int) -> np.ndarray:
    try:
        values = np.fromfile(path, dtype=dtype)
    except OSError as e:
        raise PhantomError(f"Cannot read {path}: {e}")
    if values.size != expected:
        raise PhantomError(f"{path} holds {values.size} values, expected {expected}")
    return values


def load_study(directory: str, case_id: str) -> DceStudy:
    """Read a study written by :func:`save_study`.

    Args:
        directory: Dataset directory
        case_id: Study identifier, the common stem of its files

    Returns:
        DceStudy: The study, with its mask when one was saved

    Raises:
        PhantomError: If a file is missing, truncated or malformed
    """
    base = os.path.join(directory, case_id)
    try:
        with open(base + ".json") as f:
            sidecar = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise PhantomError(f"Cannot read study sidecar {base}.json: {e}")
    if sidecar.get("format_version") != FORMAT_VERSION:
        raise PhantomError(f"Unsupported study format version {sidecar.get('format_version')}")
    try:
        shape = tuple(int(n) for n in sidecar["shape"])
        expected = int(sidecar["num_phases"]) * int(np.prod(shape))
    except (KeyError, TypeError, ValueError) as e:
        raise PhantomError(f"Malformed study sidecar {base}.json: {e}")
    phases = _read_blob(base + ".raw", "<f4", expected)
    mask = None
    if sidecar.get("has_mask"):
        mask = _read_blob(base + ".mask", np.uint8, int(np.prod(shape))).reshape(shape)
    return DceStudy(
        phases=phases.reshape((sidecar["num_phases"],) + shape).astype(np.float32),
        times=tuple(sidecar["times_s"]),
        spacing=tuple(sidecar["spacing_mm"]),
        truth_mask=mask,
        case_id=sidecar["case_id"],
        metadata=sidecar.get("metadata", {}),
    )
