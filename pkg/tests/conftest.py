"""Configuration for pytest."""

import numpy as np
import pytest

from filmseg.phantom import PhantomSpec, SchedulePolicy, generate_dataset, save_study
from filmseg.pipeline import split_cases, write_manifest
from filmseg.unet import ArchitectureConfig, Placement


@pytest.fixture(autouse=True)
def mock_env_home(monkeypatch, tmp_path):
    """Mock HOME environment to avoid touching real home directory."""
    monkeypatch.setenv("HOME", str(tmp_path))
    monkeypatch.delenv("FILMSEG_THREADS", raising=False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_spec():
    """A 16^3 phantom small enough for fast tests."""
    return PhantomSpec(volume_size=(16, 16, 16), lesion_radius_range=(2.0, 4.0), num_benign_foci=1,
                       background_smoothness=2.0)


@pytest.fixture
def tiny_architecture():
    return ArchitectureConfig(stage_channels=(4, 8), bottleneck_channels=16, placement=Placement.NONE, seed=7)


@pytest.fixture
def tiny_dataset(tmp_path, tiny_spec):
    """Five phantom studies on disk with a 3/1/1 manifest; returns the manifest path."""
    directory = tmp_path / "data"
    studies = generate_dataset(tiny_spec, 5, SchedulePolicy(max_phases=4), seed=11)
    for study in studies:
        save_study(study, str(directory))
    cases = split_cases([s.case_id for s in studies], seed=11)
    return write_manifest(str(directory), cases)


@pytest.fixture
def tiny_config(tmp_path, tiny_dataset):
    """YAML experiment file pointing at the tiny dataset."""
    path = tmp_path / "experiment.yaml"
    path.write_text(
        "output_dir: runs\n"
        "dataset:\n"
        "  directory: data\n"
        "  count: 5\n"
        "  phantom:\n"
        "    volume_size: [16, 16, 16]\n"
        "    lesion_radius_range: [2.0, 4.0]\n"
        "    num_benign_foci: 1\n"
        "    background_smoothness: 2.0\n"
        "  schedule:\n"
        "    max_phases: 4\n"
        "architecture:\n"
        "  stage_channels: [4, 8]\n"
        "  bottleneck_channels: 16\n"
        "training:\n"
        "  epochs: 1\n"
        "  batches_per_epoch: 1\n"
        "  batch_size: 1\n"
        "  patch_size: [16, 16, 16]\n"
        "compare:\n"
        "  placements: [none, all]\n"
        "  seeds: [0]\n"
    )
    return str(path)
