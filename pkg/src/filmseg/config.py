"""Experiment configuration file parser."""

import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Callable, Dict, Iterable, Optional, Tuple

import yaml

from filmseg import FilmSegError
from filmseg.phantom import KineticParams, PhantomSpec, SchedulePolicy
from filmseg.pipeline import MANIFEST_NAME, SPLITS
from filmseg.train import TrainConfig
from filmseg.unet import ArchitectureConfig, Placement

DEFAULT_PLACEMENTS = tuple(p.value for p in Placement)


class ConfigError(FilmSegError):
    """Error raised for an invalid experiment configuration."""
    pass


@dataclass
class DatasetConfig:
    """Where the phantom dataset lives and how it is generated."""
    directory: str = "data"
    count: int = 100
    split_ratios: Tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    schedule: SchedulePolicy = field(default_factory=SchedulePolicy)


@dataclass
class EvaluationConfig:
    split: str = "test"
    # None falls back to the training patch size
    patch_size: Optional[Tuple[int, int, int]] = None
    overlap: float = 0.5
    triplet_index: int = 0


@dataclass
class CompareConfig:
    placements: Tuple[str, ...] = DEFAULT_PLACEMENTS
    seeds: Tuple[int, ...] = (0, 1, 2)
    baseline: str = "none"
    # estimated-schedule dataset scored next to the in-domain split
    ood_directory: Optional[str] = None
    ood_split: str = "test"


@dataclass
class ExperimentConfig:
    output_dir: str = "runs"
    seed: int = 0
    threads: int = 1
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    architecture: ArchitectureConfig = field(default_factory=ArchitectureConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    compare: CompareConfig = field(default_factory=CompareConfig)

    @property
    def manifest_path(self) -> str:
        return os.path.join(self.dataset.directory, MANIFEST_NAME)

    @property
    def ood_manifest_path(self) -> Optional[str]:
        if self.compare.ood_directory is None:
            return None
        return os.path.join(self.compare.ood_directory, MANIFEST_NAME)

    def validate(self) -> None:
        placements = list(self.compare.placements)
        if not placements:
            raise ConfigError("compare.placements must not be empty")
        if len(set(placements)) != len(placements):
            raise ConfigError(f"compare.placements has duplicates: {placements}")
        for name in placements:
            try:
                Placement.parse(name)
            except FilmSegError as e:
                raise ConfigError(str(e))
        if not self.compare.seeds:
            raise ConfigError("compare.seeds must not be empty")
        if self.compare.ood_split not in SPLITS:
            raise ConfigError(
                f"compare.ood_split must be one of {', '.join(SPLITS)}, got {self.compare.ood_split}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        try:
            self.dataset.phantom.validate()
            self.architecture.validate()
            self.training.validate()
        except FilmSegError as e:
            raise ConfigError(str(e))

    def with_overrides(self, seed: Optional[int] = None, output_dir: Optional[str] = None,
                       threads: Optional[int] = None) -> "ExperimentConfig":
        """Apply command-line flags; the seed drives model initialization and training."""
        if seed is not None:
            self.seed = seed
        if output_dir is not None:
            self.output_dir = os.path.abspath(output_dir)
        if threads is not None:
            self.threads = threads
        self.architecture.seed = self.seed
        self.training.seed = self.seed
        return self


def _section(cls, data: Any, name: str, exclude: Iterable[str] = (),
             nested: Optional[Dict[str, Callable[[Any, str], Any]]] = None):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"Section '{name}' must be a mapping, got {type(data).__name__}")
    allowed = {f.name for f in fields(cls)} - set(exclude)
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"Unknown keys in '{name}': {', '.join(unknown)}")
    nested = nested or {}
    kwargs = {}
    for key, value in data.items():
        if key in nested:
            kwargs[key] = nested[key](value, f"{name}.{key}")
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError, FilmSegError) as e:
        raise ConfigError(f"Invalid '{name}' section: {e}")


def _tissues(data: Any, name: str) -> Dict[str, KineticParams]:
    if not isinstance(data, dict):
        raise ConfigError(f"'{name}' must map tissue names to kinetic parameters")
    return {tissue: _section(KineticParams, params, f"{name}.{tissue}") for tissue, params in data.items()}


def _phantom(data: Any, name: str) -> PhantomSpec:
    return _section(PhantomSpec, data, name, nested={"tissue_params": _tissues})


def _schedule(data: Any, name: str) -> SchedulePolicy:
    return _section(SchedulePolicy, data, name)


def _dataset(data: Any, name: str) -> DatasetConfig:
    return _section(DatasetConfig, data, name, nested={"phantom": _phantom, "schedule": _schedule})


def parse_config(data: Any, base_dir: str = ".") -> ExperimentConfig:
    """Build an ExperimentConfig from a parsed document; relative paths resolve against ``base_dir``."""
    config = _section(ExperimentConfig, data, "config", nested={
        "dataset": _dataset,
        "architecture": lambda value, name: _section(ArchitectureConfig, value, name, exclude=("placement",)),
        "training": lambda value, name: _section(TrainConfig, value, name),
        "evaluation": lambda value, name: _section(EvaluationConfig, value, name),
        "compare": lambda value, name: _section(CompareConfig, value, name),
    })
    config.dataset.directory = os.path.normpath(os.path.join(base_dir, config.dataset.directory))
    config.output_dir = os.path.normpath(os.path.join(base_dir, config.output_dir))
    if config.compare.ood_directory is not None:
        config.compare.ood_directory = os.path.normpath(os.path.join(base_dir, config.compare.ood_directory))
    config.validate()
    return config.with_overrides()


def load_config(path: Optional[str] = None) -> ExperimentConfig:
    """Load a YAML or JSON experiment file, or the defaults when ``path`` is None.

    Raises:
        ConfigError: If the file is missing, unparsable or holds unknown keys
    """
    if path is None:
        return parse_config({}, os.getcwd())
    if not os.path.exists(path):
        raise ConfigError(f"Config file not found: {path}")
    try:
        with open(path, 'r') as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigError(f"Cannot parse {path}: {e}")
    return parse_config(data, os.path.dirname(os.path.abspath(path)))


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, Placement):
        return value.value
    return value


def config_to_dict(config: ExperimentConfig) -> Dict[str, Any]:
    data = _plain(asdict(config))
    data["architecture"].pop("placement")
    return data


def write_default_config(path: str) -> None:
    """Write every default setting as YAML, with relative data and output directories.

    Args:
        path: Destination file; overwritten if present
    """
    data = config_to_dict(ExperimentConfig())
    data["dataset"]["directory"] = "data"
    data["output_dir"] = "runs"
    with open(path, "w") as f:
        yaml.safe_dump(data, f, sort_keys=False)
