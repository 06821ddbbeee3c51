"""Axial slice extraction and 2D resampling to the network input size."""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Union

import numpy as np
import torch
import torch.nn.functional as F
from errors import DataError, ValidationError
from volume import LabelVolume, ScanProvenance, Volume, validate_pair

logger = logging.getLogger(__name__)

SLICE_SIZE = 224
CACHE_MAGIC = np.array([0x4D, 0x53, 0x53, 0x4C], dtype=np.uint8)  # "MSSL"


@dataclass(frozen=True)
class SliceProvenance:
    dataset_id: str
    patient_id: str
    scan_id: str
    z_index: int


@dataclass(frozen=True, eq=False)
class SliceSample:
    """One resized axial image with its lesion mask"""

    image: np.ndarray  # float32, SLICE_SIZE x SLICE_SIZE
    mask: np.ndarray  # uint8 in {0, 1}
    provenance: SliceProvenance
    lesion_pixels: int = field(init=False)

    def __post_init__(self) -> None:
        image = np.asarray(self.image, dtype=np.float32)
        mask = np.asarray(self.mask, dtype=np.uint8)
        if image.ndim != 2 or image.shape != mask.shape:
            raise ValidationError(
                f"Slice image {image.shape} and mask {mask.shape} "
                "must be equal 2D grids"
            )
        if not np.all(np.isfinite(image)):
            raise ValidationError("Slice image contains non-finite values")
        if mask.size and mask.max() > 1:
            raise ValidationError("Slice mask must be binary")
        image.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "image", image)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "lesion_pixels", int(mask.sum()))

    @property
    def scan_id(self) -> str:
        return self.provenance.scan_id

    @property
    def group_key(self) -> str:
        """Patient when known, otherwise scan"""
        return self.provenance.patient_id or self.provenance.scan_id


def _check_grid(img: np.ndarray) -> np.ndarray:
    grid = np.asarray(img)
    if grid.ndim != 2 or min(grid.shape) < 1:
        raise ValidationError(f"Expected a non-empty 2D grid, got shape {grid.shape}")
    return grid


def resize_bilinear(
    img: np.ndarray, height: int = SLICE_SIZE, width: int = SLICE_SIZE
) -> np.ndarray:
    """Separable bilinear resampling with half-pixel sample centers"""
    grid = _check_grid(img)
    if grid.shape == (height, width):
        return grid.astype(np.float64, copy=True)
    tensor = torch.from_numpy(grid.astype(np.float64))[None, None]
    resized = F.interpolate(
        tensor, size=(height, width), mode="bilinear", align_corners=False
    )
    return resized[0, 0].numpy()


def resize_nearest(
    mask: np.ndarray, height: int = SLICE_SIZE, width: int = SLICE_SIZE
) -> np.ndarray:
    """Nearest-neighbour resampling with the same sample placement"""
    grid = _check_grid(mask)
    if grid.shape == (height, width):
        return grid.astype(np.uint8, copy=True)
    tensor = torch.from_numpy(grid.astype(np.float32))[None, None]
    resized = F.interpolate(tensor, size=(height, width), mode="nearest-exact")
    return (resized[0, 0].numpy() > 0.5).astype(np.uint8)


def extract_slices(
    v: Volume, m: LabelVolume, min_brain_voxels: int = 1, size: int = SLICE_SIZE
) -> List[SliceSample]:
    """Axial planes with at least ``min_brain_voxels`` nonzero image voxels"""
    validate_pair(v, m)
    provenance = v.provenance
    samples = []
    for z in range(v.dims[2]):
        plane = v.voxels[:, :, z]
        if np.count_nonzero(plane) < min_brain_voxels:
            continue
        samples.append(
            SliceSample(
                image=resize_bilinear(plane, size, size),
                mask=resize_nearest(m.labels[:, :, z], size, size),
                provenance=SliceProvenance(
                    dataset_id=provenance.dataset_id,
                    patient_id=provenance.patient_id,
                    scan_id=provenance.scan_id,
                    z_index=z,
                ),
            )
        )
    logger.debug(
        "Extracted %d of %d slices from %s",
        len(samples),
        v.dims[2],
        provenance.scan_id,
    )
    return samples


def slice_counts(samples: Iterable[SliceSample]) -> Dict[str, int]:
    """Number of slices per dataset"""
    counts: Dict[str, int] = {}
    for sample in samples:
        key = sample.provenance.dataset_id
        counts[key] = counts.get(key, 0) + 1
    return counts


def save_slice_cache(samples: List[SliceSample], path: Union[str, Path]) -> None:
    """Write one scan's slices: header, then per slice z, image, packed mask"""
    size = samples[0].image.shape[0] if samples else SLICE_SIZE
    header = np.array([len(samples), size], dtype="<i4")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as handle:
        handle.write(CACHE_MAGIC.tobytes())
        handle.write(header.tobytes())
        for sample in samples:
            handle.write(np.array([sample.provenance.z_index], dtype="<i4").tobytes())
            handle.write(sample.image.astype("<f4").tobytes())
            handle.write(np.packbits(sample.mask.ravel()).tobytes())


def load_slice_cache(
    path: Union[str, Path], provenance: Optional[ScanProvenance] = None
) -> List[SliceSample]:
    """Read slices written by ``save_slice_cache``"""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError as e:
        raise DataError(f"Slice cache not found: {path}") from e
    if raw[:4] != CACHE_MAGIC.tobytes():
        raise DataError(f"{path} is not a slice cache")
    if len(raw) < 12:
        raise DataError(f"Slice cache {path} is truncated")

    count, size = np.frombuffer(raw, dtype="<i4", count=2, offset=4)
    pixels = int(size) * int(size)
    packed = (pixels + 7) // 8
    record = 4 + 4 * pixels + packed
    if len(raw) != 12 + int(count) * record:
        raise DataError(f"Slice cache {path} is truncated")

    prov = provenance or ScanProvenance(scan_id=path.stem)
    samples = []
    offset = 12
    for _ in range(int(count)):
        z_index = int(np.frombuffer(raw, dtype="<i4", count=1, offset=offset)[0])
        image = np.frombuffer(raw, dtype="<f4", count=pixels, offset=offset + 4)
        bits = np.frombuffer(
            raw, dtype=np.uint8, count=packed, offset=offset + 4 + 4 * pixels
        )
        mask = np.unpackbits(bits)[:pixels]
        samples.append(
            SliceSample(
                image=image.reshape(int(size), int(size)).astype(np.float32),
                mask=mask.reshape(int(size), int(size)),
                provenance=SliceProvenance(
                    dataset_id=prov.dataset_id,
                    patient_id=prov.patient_id,
                    scan_id=prov.scan_id,
                    z_index=z_index,
                ),
            )
        )
        offset += record
    return samples
