"""Synthetic multi-site FLAIR phantoms with exact lesion ground truth.

A scan is an ellipsoidal brain with an inner (white matter) and outer (gray
matter) tissue class under a smooth multiplicative field, plus hyperintense
ellipsoidal lesions inside the white matter. Anatomy and lesions depend only
on the structural seed; the site's monotone intensity warp and Gaussian noise
are then applied to brain voxels, so the same structural seed gives identical
masks at every site.
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple, Union

import numpy as np
from config import derive_seed
from errors import ValidationError
from manifest import save_manifest
from models import DatasetManifest, ManifestEntry, PhantomProfile
from scipy import ndimage
from volume import LabelVolume, ScanProvenance, Volume, save_volume

logger = logging.getLogger(__name__)

WHITE_MATTER = 1.0
GRAY_MATTER = 1.15
LESION_RANGE = (1.5, 1.8)  # Multiples of the white-matter level
FIELD_AMPLITUDE = 0.05
MIN_SIDE = 4


def _grid_mm(
    dims: Tuple[int, int, int], spacing: Tuple[float, float, float]
) -> Tuple[np.ndarray, ...]:
    axes = [(np.arange(n) - (n - 1) / 2.0) * s for n, s in zip(dims, spacing)]
    return tuple(np.meshgrid(*axes, indexing="ij"))


def _ellipsoid(
    x: np.ndarray,
    y: np.ndarray,
    z: np.ndarray,
    center: Sequence[float],
    radii: Sequence[float],
) -> np.ndarray:
    return (
        ((x - center[0]) / radii[0]) ** 2
        + ((y - center[1]) / radii[1]) ** 2
        + ((z - center[2]) / radii[2]) ** 2
    ) <= 1.0


def phantom_anatomy(
    profile: PhantomProfile, scan_index: int
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unwarped intensities, brain mask and lesion mask of one scan"""
    dims, spacing = profile.dims, profile.spacing
    if min(dims) < MIN_SIDE:
        raise ValidationError(
            f"Phantom dims {dims} too small; each side needs >= {MIN_SIDE}"
        )
    rng = np.random.default_rng(derive_seed(profile.seed, "structure", scan_index))
    x, y, z = _grid_mm(dims, spacing)
    extent = np.array([n * s for n, s in zip(dims, spacing)])

    brain_radii = extent * np.array([0.42, 0.45, 0.48]) * rng.uniform(0.95, 1.05, 3)
    brain = _ellipsoid(x, y, z, (0.0, 0.0, 0.0), brain_radii)
    white = _ellipsoid(x, y, z, (0.0, 0.0, 0.0), brain_radii * 0.7)

    phase = rng.uniform(0, 2 * np.pi, 3)
    field = 1.0 + FIELD_AMPLITUDE * (
        np.sin(2 * np.pi * x / extent[0] + phase[0])
        * np.cos(2 * np.pi * y / extent[1] + phase[1])
        * np.cos(np.pi * z / extent[2] + phase[2])
    )

    intensity = np.where(white, WHITE_MATTER, GRAY_MATTER) * brain
    lesions = np.zeros(dims, dtype=bool)
    low, high = profile.lesion_count_range
    count = int(rng.integers(low, high + 1))
    inner = brain_radii * 0.7
    for _ in range(count):
        # Rejection-sample a center inside the white matter
        while True:
            center = rng.uniform(-inner, inner)
            if np.sum((center / inner) ** 2) <= 0.8:
                break
        radii = rng.uniform(*profile.lesion_radius_range_mm, size=3)
        lesion = _ellipsoid(x, y, z, center, radii) & brain
        lesions |= lesion
        level = rng.uniform(*LESION_RANGE) * WHITE_MATTER
        intensity = np.where(lesion, level, intensity)

    return intensity * field, brain, lesions


def apply_site(
    profile: PhantomProfile, intensity: np.ndarray, brain: np.ndarray, scan_index: int
) -> np.ndarray:
    """Monotone warp gain * I^gamma + offset, then noise, inside the brain"""
    seed = derive_seed(profile.seed, "noise", profile.site_id, scan_index)
    rng = np.random.default_rng(seed)
    image = np.zeros_like(intensity)
    warped = profile.gain * intensity[brain] ** profile.gamma + profile.offset
    if profile.noise_sigma > 0:
        warped = warped + rng.normal(0.0, profile.noise_sigma, warped.shape)
    # Brain voxels stay strictly positive so background is exactly zero
    image[brain] = np.maximum(warped, 1e-6)
    return image


def rater_masks(
    profile: PhantomProfile, lesions: np.ndarray, scan_index: int
) -> List[np.ndarray]:
    """Simulated annotators: each lesion dilated or eroded at random"""
    rng = np.random.default_rng(derive_seed(profile.seed, "raters", scan_index))
    labelled, n_lesions = ndimage.label(lesions)
    masks = []
    for _ in range(profile.rater_count):
        mask = np.zeros_like(lesions)
        for k in range(1, n_lesions + 1):
            lesion = labelled == k
            action = rng.integers(0, 3)
            if action == 1:
                lesion = ndimage.binary_dilation(lesion)
            elif action == 2:
                eroded = ndimage.binary_erosion(lesion)
                lesion = eroded if eroded.any() else lesion
            mask |= lesion
        masks.append(mask)
    return masks


def generate_scan(
    profile: PhantomProfile, scan_index: int
) -> Tuple[Volume, LabelVolume, List[LabelVolume]]:
    intensity, brain, lesions = phantom_anatomy(profile, scan_index)
    provenance = ScanProvenance(
        dataset_id=profile.site_id,
        patient_id=f"{profile.site_id}_p{scan_index:02d}",
        scan_id=f"{profile.site_id}_s{scan_index:02d}",
    )
    volume = Volume(
        voxels=apply_site(profile, intensity, brain, scan_index),
        spacing=profile.spacing,
        provenance=provenance,
    )
    truth = LabelVolume(labels=lesions, spacing=profile.spacing, provenance=provenance)
    raters = [
        LabelVolume(labels=mask, spacing=profile.spacing, provenance=provenance)
        for mask in rater_masks(profile, lesions, scan_index)
    ]
    return volume, truth, raters


def generate_phantom_dataset(
    profile: PhantomProfile, n_scans: int, out_dir: Union[str, Path]
) -> Tuple[DatasetManifest, List[Path]]:
    """Write ``n_scans`` phantom scans and their manifest under out_dir/site_id"""
    if n_scans < 1:
        raise ValidationError("A phantom dataset needs at least one scan")
    root = Path(out_dir) / profile.site_id
    files: List[Path] = []
    entries = []
    for s in range(n_scans):
        volume, truth, raters = generate_scan(profile, s)
        scan_id = volume.provenance.scan_id
        image_name = f"{scan_id}_flair.nii.gz"
        truth_name = f"{scan_id}_consensus.nii.gz"
        save_volume(volume, root / image_name)
        save_volume(truth, root / truth_name)
        files += [root / image_name, root / truth_name]

        mask_paths = {}
        for r, rater in enumerate(raters, start=1):
            rater_name = f"{scan_id}_rater{r}.nii.gz"
            save_volume(rater, root / rater_name)
            files.append(root / rater_name)
            mask_paths[str(r)] = rater_name

        entries.append(
            ManifestEntry(
                patient_id=volume.provenance.patient_id,
                scan_id=scan_id,
                center_tag=profile.center_tag or profile.site_id,
                image_path=image_name,
                mask_paths=mask_paths,
                consensus_path=truth_name,
            )
        )

    manifest = DatasetManifest(
        dataset_id=profile.site_id, entries=entries, root=str(root)
    )
    save_manifest(manifest, root / "manifest.json")
    files.append(root / "manifest.json")
    logger.info("Generated %d phantom scans for site %s", n_scans, profile.site_id)
    return manifest, files


def default_suite(
    seed: int = 0, dims: Tuple[int, int, int] = (64, 64, 24)
) -> List[PhantomProfile]:
    """Four sites with distinct monotone warps and noise levels"""
    warps: Dict[str, Dict[str, Any]] = {
        "siteA": dict(gamma=1.0, gain=1.0, offset=0.0, noise_sigma=0.02),
        "siteB": dict(gamma=0.6, gain=2.5, offset=0.3, noise_sigma=0.03),
        "siteC": dict(gamma=1.6, gain=0.7, offset=0.1, noise_sigma=0.02),
        "siteD": dict(gamma=0.8, gain=4.0, offset=0.0, noise_sigma=0.05),
    }
    return [
        PhantomProfile(
            site_id=site, dims=dims, seed=derive_seed(seed, "site", site), **warp
        )
        for site, warp in warps.items()
    ]
