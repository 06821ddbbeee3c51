import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from errors import DataError, ValidationError
from metrics import fuse_majority, fuse_union
from models import DatasetManifest, ManifestEntry
from pydantic import ValidationError as SchemaError
from volume import (
    LabelVolume,
    ScanProvenance,
    Volume,
    load_label_volume,
    load_volume,
    validate_pair,
)

logger = logging.getLogger(__name__)


def load_manifest(path: Union[str, Path]) -> DatasetManifest:
    """Read a JSON manifest; relative paths resolve against its directory"""
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise DataError(f"Manifest not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ValidationError(f"Manifest {path} is not valid JSON: {e}") from e

    payload.setdefault("root", str(path.parent.resolve()))
    try:
        return DatasetManifest(**payload)
    except SchemaError as e:
        raise ValidationError(f"Invalid manifest {path}: {e}") from e


def save_manifest(manifest: DatasetManifest, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = manifest.model_dump(exclude={"root"})
    path.write_text(json.dumps(payload, indent=2), encoding="utf-8")


def resolve(manifest: DatasetManifest, relative: str) -> Path:
    candidate = Path(relative)
    if candidate.is_absolute() or manifest.root is None:
        return candidate
    return Path(manifest.root) / candidate


def _provenance(
    manifest: DatasetManifest, entry: ManifestEntry, rater_id: Optional[str] = None
) -> ScanProvenance:
    return ScanProvenance(
        dataset_id=manifest.dataset_id,
        patient_id=entry.patient_id,
        scan_id=entry.scan_id,
        rater_id=rater_id,
    )


def load_image(manifest: DatasetManifest, entry: ManifestEntry) -> Volume:
    return load_volume(
        resolve(manifest, entry.image_path), _provenance(manifest, entry)
    )


def load_rater_masks(
    manifest: DatasetManifest, entry: ManifestEntry
) -> List[LabelVolume]:
    return [
        load_label_volume(resolve(manifest, path), _provenance(manifest, entry, rater))
        for rater, path in entry.mask_paths.items()
    ]


def load_labels(
    manifest: DatasetManifest, entry: ManifestEntry, label_source: str = "consensus"
) -> LabelVolume:
    """Ground truth for a scan under the chosen annotation source"""
    if label_source == "consensus":
        if entry.consensus_path:
            return load_label_volume(
                resolve(manifest, entry.consensus_path),
                _provenance(manifest, entry, "consensus"),
            )
        if len(entry.mask_paths) == 1:
            return load_rater_masks(manifest, entry)[0]
        # No shipped consensus: fall back to the union of raters
        logger.warning(
            "Scan %s has no consensus mask; using rater union", entry.scan_id
        )
        return fuse_union(load_rater_masks(manifest, entry))

    if label_source.startswith("rater:"):
        rater = label_source.split(":", 1)[1]
        if rater not in entry.mask_paths:
            raise DataError(f"Scan {entry.scan_id} has no mask from rater {rater}")
        return load_label_volume(
            resolve(manifest, entry.mask_paths[rater]),
            _provenance(manifest, entry, rater),
        )

    raters = load_rater_masks(manifest, entry)
    if not raters:
        raise DataError(f"Scan {entry.scan_id} has no rater masks to fuse")
    if label_source == "union":
        return fuse_union(raters)
    if label_source.startswith("majority:"):
        return fuse_majority(raters, int(label_source.split(":", 1)[1]))
    raise ValidationError(f"Unknown label source {label_source!r}")


def load_scan(
    manifest: DatasetManifest, entry: ManifestEntry, label_source: str = "consensus"
) -> Tuple[Volume, LabelVolume]:
    volume = load_image(manifest, entry)
    labels = load_labels(manifest, entry, label_source)
    validate_pair(volume, labels)
    return volume, labels


@dataclass
class IngestReport:
    """Summary of a validated dataset"""

    dataset_id: str
    scans: int = 0
    patients: int = 0
    slices: int = 0
    lesion_voxels: int = 0
    centers: Dict[str, int] = field(default_factory=dict)
    heterogeneous: bool = False


def ingest(
    manifest: DatasetManifest, min_brain_voxels: int = 1, load_data: bool = True
) -> IngestReport:
    """Check every file of a manifest and count brain-containing slices"""
    missing = [
        str(resolve(manifest, p))
        for entry in manifest.entries
        for p in entry.all_paths()
        if not resolve(manifest, p).exists()
    ]
    if missing:
        raise DataError(f"{len(missing)} file(s) missing, first: {missing[0]}")

    report = IngestReport(
        dataset_id=manifest.dataset_id,
        scans=len(manifest.entries),
        patients=len({e.patient_id for e in manifest.entries}),
        heterogeneous=manifest.heterogeneous,
    )
    for entry in manifest.entries:
        tag = entry.center_tag or "untagged"
        report.centers[tag] = report.centers.get(tag, 0) + 1
        if not load_data:
            continue
        volume, labels = load_scan(manifest, entry)
        brain_per_plane = np.count_nonzero(volume.voxels, axis=(0, 1))
        report.slices += int(np.count_nonzero(brain_per_plane >= min_brain_voxels))
        report.lesion_voxels += labels.lesion_voxels

    logger.info(
        "Dataset %s: %d scans, %d patients, %d slices",
        report.dataset_id,
        report.scans,
        report.patients,
        report.slices,
    )
    return report
