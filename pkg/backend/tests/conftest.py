"""
Test configuration and fixtures for the segmentation harness tests.
"""
import shutil
import tempfile
from pathlib import Path
from typing import Dict, Generator

import numpy as np
import pytest
from config import config
from models import DatasetManifest, PhantomProfile, Topology, TrainConfig
from phantom import generate_phantom_dataset
from volume import LabelVolume, ScanProvenance, Volume


@pytest.fixture(scope="session")
def temp_dir() -> Generator[Path, None, None]:
    """Create a temporary directory for generated datasets."""
    temp_dir = tempfile.mkdtemp()
    yield Path(temp_dir)
    shutil.rmtree(temp_dir)


@pytest.fixture
def tiny_profile() -> PhantomProfile:
    """A 16x16x8 noiseless site with small lesions."""
    return PhantomProfile(
        site_id="tinyA",
        dims=(16, 16, 8),
        lesion_count_range=(2, 3),
        lesion_radius_range_mm=(1.5, 2.5),
        seed=7,
    )


@pytest.fixture(scope="session")
def tiny_datasets(temp_dir: Path) -> Dict[str, DatasetManifest]:
    """Three tiny phantom sites of four scans each, with two raters."""
    manifests = {}
    warps = {
        "tinyA": dict(gamma=1.0, gain=1.0, offset=0.0),
        "tinyB": dict(gamma=0.7, gain=2.0, offset=0.2),
        "tinyC": dict(gamma=1.4, gain=0.8, offset=0.0),
    }
    for k, (site, warp) in enumerate(warps.items()):
        profile = PhantomProfile(
            site_id=site,
            dims=(16, 16, 8),
            lesion_count_range=(2, 3),
            lesion_radius_range_mm=(1.5, 2.5),
            noise_sigma=0.01,
            rater_count=2,
            center_tag=f"center0{k + 1}",
            seed=100 + k,
            **warp,
        )
        manifest, _ = generate_phantom_dataset(profile, 4, temp_dir / "tiny")
        manifests[site] = manifest
    return manifests


@pytest.fixture
def tiny_settings(tmp_path: Path):
    """Settings sized for 16x16 slices."""
    return config.updated(
        SLICE_SIZE=16,
        TEMPLATE_RESOLUTION=64,
        RESULTS_DIR=str(tmp_path / "results"),
        DATA_DIR=str(tmp_path / "data"),
        TORCH_THREADS=1,
    )


@pytest.fixture
def tiny_train_config() -> TrainConfig:
    """One epoch of a depth-2, 2-channel network."""
    return TrainConfig(
        epochs=1,
        batch_size=4,
        topology=Topology(depth=2, base_channels=2),
    )


@pytest.fixture
def ball_pair() -> tuple:
    """A 12x12x6 volume with a bright ball and its mask."""
    x, y, z = np.meshgrid(np.arange(12), np.arange(12), np.arange(6), indexing="ij")
    brain = (x - 5.5) ** 2 + (y - 5.5) ** 2 + ((z - 2.5) * 2) ** 2 <= 25
    lesion = (x - 5.5) ** 2 + (y - 5.5) ** 2 + ((z - 2.5) * 2) ** 2 <= 4
    voxels = np.where(lesion, 2.0, 1.0) * brain
    provenance = ScanProvenance(dataset_id="ball", patient_id="p0", scan_id="s0")
    return (
        Volume(voxels=voxels, provenance=provenance),
        LabelVolume(labels=lesion.astype(np.uint8), provenance=provenance),
    )


@pytest.fixture(autouse=True)
def setup_test_environment(monkeypatch):
    """Set up test environment variables."""
    monkeypatch.setenv("TESTING", "true")
    monkeypatch.setenv("TORCH_THREADS", "1")
