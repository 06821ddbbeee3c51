"""3D scans and binary lesion masks: data model and file I/O.

Two on-disk formats are supported: single-file NIfTI-1 (``.nii``/``.nii.gz``)
read and written through nibabel, and a portable raw format made of a JSON
sidecar ``{dims, spacing, dtype}`` next to a flat little-endian payload in
x-fastest order (``scan.json`` + ``scan.raw``).
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple, Union

import nibabel as nib
import numpy as np
from errors import DataError, ValidationError
from nibabel.filebasedimages import ImageFileError
from nibabel.spatialimages import HeaderDataError

logger = logging.getLogger(__name__)

SUPPORTED_DTYPES = (np.dtype(np.uint8), np.dtype(np.int16), np.dtype(np.float32))
RAW_SUFFIXES = (".json", ".raw")


@dataclass(frozen=True)
class ScanProvenance:
    """Where a volume or mask came from"""

    dataset_id: str = ""
    patient_id: str = ""
    scan_id: str = ""
    modality: str = "FLAIR"
    rater_id: Optional[str] = None  # Set for masks; "consensus" for ground truth


@dataclass(frozen=True, eq=False)
class Volume:
    """Magnitude image indexed [x, y, z]; z is the axial slicing axis"""

    voxels: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    provenance: ScanProvenance = field(default_factory=ScanProvenance)
    orientation_unknown: bool = False
    axis_permutation: Tuple[int, int, int] = (0, 1, 2)  # Source axis of each axis

    def __post_init__(self) -> None:
        voxels = np.asarray(self.voxels, dtype=np.float64)
        if voxels.ndim != 3 or min(voxels.shape) < 1:
            raise ValidationError(f"volume must be 3D, got shape {voxels.shape}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValidationError(f"spacing must be 3 positive values: {self.spacing}")
        if not np.all(np.isfinite(voxels)):
            raise ValidationError("volume contains non-finite voxels")
        if voxels.size and voxels.min() < 0:
            raise ValidationError("volume contains negative intensities")
        voxels.setflags(write=False)
        object.__setattr__(self, "voxels", voxels)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self) -> Tuple[int, int, int]:
        nx, ny, nz = self.voxels.shape
        return nx, ny, nz

    def with_voxels(self, voxels: np.ndarray) -> "Volume":
        """Same geometry and provenance, new intensities"""
        return Volume(
            voxels=voxels,
            spacing=self.spacing,
            provenance=self.provenance,
            orientation_unknown=self.orientation_unknown,
            axis_permutation=self.axis_permutation,
        )


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Lesion mask on the grid of its paired Volume"""

    labels: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    provenance: ScanProvenance = field(default_factory=ScanProvenance)
    orientation_unknown: bool = False
    axis_permutation: Tuple[int, int, int] = (0, 1, 2)

    def __post_init__(self) -> None:
        labels = np.asarray(self.labels)
        if labels.ndim != 3 or min(labels.shape) < 1:
            raise ValidationError(f"mask must be 3D, got shape {labels.shape}")
        if labels.dtype != np.uint8:
            if np.any(labels < 0) or np.any(labels > 255) or np.any(labels % 1):
                raise ValidationError("mask values must be small nonnegative integers")
            labels = labels.astype(np.uint8)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self) -> Tuple[int, int, int]:
        nx, ny, nz = self.labels.shape
        return nx, ny, nz

    @property
    def lesion_voxels(self) -> int:
        return int(np.count_nonzero(self.labels))


def _is_raw(path: Path) -> bool:
    return path.suffix in RAW_SUFFIXES


def _raw_paths(path: Path) -> Tuple[Path, Path]:
    return path.with_suffix(".json"), path.with_suffix(".raw")


def _scan_id_from(path: Path) -> str:
    name = path.name
    for suffix in (".nii.gz", ".nii", ".json", ".raw"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return name


def _drop_trailing_singletons(shape: Tuple[int, ...]) -> Tuple[int, ...]:
    shape = tuple(shape)
    while len(shape) > 3 and shape[-1] == 1:
        shape = shape[:-1]
    return shape


def _superior_last(
    img: nib.Nifti1Image, data: np.ndarray, spacing: Tuple[float, ...]
) -> Tuple[np.ndarray, Tuple[float, ...], Tuple[int, int, int], bool]:
    """Permute axes so the inferior-superior axis is last when the header allows"""
    header = img.header
    qform_code = int(header["qform_code"])
    sform_code = int(header["sform_code"])
    if qform_code == 0 and sform_code == 0:
        return data, spacing, (0, 1, 2), True

    codes = nib.aff2axcodes(img.affine)
    si_axes = [axis for axis, code in enumerate(codes) if code in ("S", "I")]
    if len(si_axes) != 1:
        return data, spacing, (0, 1, 2), True

    si_axis = si_axes[0]
    order = tuple([axis for axis in range(3) if axis != si_axis] + [si_axis])
    if order != (0, 1, 2):
        logger.info("Reordering axes %s so the axial axis is last", order)
        data = np.transpose(data, order)
        spacing = tuple(spacing[axis] for axis in order)
    return data, spacing, (order[0], order[1], order[2]), False


def _read_nifti(
    path: Path,
) -> Tuple[np.ndarray, np.dtype, Tuple[float, ...], Tuple[int, int, int], bool]:
    try:
        img = nib.load(str(path))
    except FileNotFoundError as e:
        raise DataError(f"File not found: {path}") from e
    except (ImageFileError, HeaderDataError, OSError, ValueError) as e:
        raise DataError(f"Unreadable NIfTI header in {path}: {e}") from e

    if not isinstance(img, nib.Nifti1Image):
        raise DataError(f"{path} is not a NIfTI-1 image")

    stored_dtype = img.header.get_data_dtype().newbyteorder("=")
    if stored_dtype not in SUPPORTED_DTYPES:
        raise DataError(f"Unsupported NIfTI datatype {stored_dtype} in {path}")

    shape = _drop_trailing_singletons(img.shape)
    if len(shape) != 3:
        raise DataError(f"{path} has {len(shape)} dimensions, expected 3")

    # get_fdata applies scl_slope / scl_inter (slope 0 means unscaled)
    data = img.get_fdata(dtype=np.float64).reshape(shape)
    spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
    data, spacing, permutation, unknown = _superior_last(img, data, spacing)
    return data, stored_dtype, spacing, permutation, unknown


def _read_raw(path: Path) -> Tuple[np.ndarray, np.dtype, Tuple[float, ...]]:
    sidecar, payload = _raw_paths(path)
    try:
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
        dims = tuple(int(d) for d in meta["dims"])
        spacing = tuple(float(s) for s in meta.get("spacing", (1.0, 1.0, 1.0)))
        dtype = np.dtype(meta["dtype"]).newbyteorder("<")
    except FileNotFoundError as e:
        raise DataError(f"File not found: {sidecar}") from e
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"Unreadable raw sidecar {sidecar}: {e}") from e

    if dtype.newbyteorder("=") not in SUPPORTED_DTYPES:
        raise DataError(f"Unsupported raw datatype {dtype} in {sidecar}")
    if len(dims) != 3:
        raise DataError(f"{sidecar} declares {len(dims)} dimensions, expected 3")

    try:
        flat = np.fromfile(payload, dtype=dtype)
    except FileNotFoundError as e:
        raise DataError(f"File not found: {payload}") from e
    if flat.size != int(np.prod(dims)):
        raise DataError(
            f"{payload} holds {flat.size} voxels, header declares {int(np.prod(dims))}"
        )
    data = flat.reshape(dims, order="F").astype(np.float64)
    return data, dtype.newbyteorder("="), spacing


def _read_any(
    path: Union[str, Path],
) -> Tuple[np.ndarray, np.dtype, Tuple[float, ...], Tuple[int, int, int], bool]:
    path = Path(path)
    if _is_raw(path):
        data, dtype, spacing = _read_raw(path)
        return data, dtype, spacing, (0, 1, 2), False
    return _read_nifti(path)


def load_volume(
    path: Union[str, Path], provenance: Optional[ScanProvenance] = None
) -> Volume:
    """Load a FLAIR scan from NIfTI-1 or the portable raw format"""
    path = Path(path)
    data, _, spacing, permutation, unknown = _read_any(path)
    if not np.all(np.isfinite(data)):
        bad = np.argwhere(~np.isfinite(data))[0]
        raise DataError(f"Non-finite voxel at {tuple(bad)} in {path}")
    if unknown:
        logger.warning("No orientation codes in %s; axes stored as-is", path)
    try:
        return Volume(
            voxels=data,
            spacing=(spacing[0], spacing[1], spacing[2]),
            provenance=provenance or ScanProvenance(scan_id=_scan_id_from(path)),
            orientation_unknown=unknown,
            axis_permutation=permutation,
        )
    except ValidationError as e:
        raise DataError(f"{path}: {e}") from e


def load_label_volume(
    path: Union[str, Path], provenance: Optional[ScanProvenance] = None
) -> LabelVolume:
    """Load a lesion mask; float masks are binarized at > 0.5"""
    path = Path(path)
    data, dtype, spacing, permutation, unknown = _read_any(path)
    if not np.all(np.isfinite(data)):
        raise DataError(f"Non-finite mask value in {path}")
    if dtype.kind == "f":
        logger.warning("Float mask %s binarized at > 0.5", path)
        data = (data > 0.5).astype(np.uint8)
    try:
        return LabelVolume(
            labels=data,
            spacing=(spacing[0], spacing[1], spacing[2]),
            provenance=provenance
            or ScanProvenance(scan_id=_scan_id_from(path), rater_id="consensus"),
            orientation_unknown=unknown,
            axis_permutation=permutation,
        )
    except ValidationError as e:
        raise DataError(f"{path}: {e}") from e


def save_volume(v: Union[Volume, LabelVolume], path: Union[str, Path]) -> None:
    """Write float32 (Volume) or uint8 (LabelVolume) NIfTI-1 or raw"""
    path = Path(path)
    if isinstance(v, LabelVolume):
        payload = np.asarray(v.labels, dtype=np.uint8)
    else:
        payload = np.asarray(v.voxels, dtype=np.float32)

    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if _is_raw(path):
            sidecar, raw = _raw_paths(path)
            meta = {
                "dims": list(payload.shape),
                "spacing": list(v.spacing),
                "dtype": payload.dtype.str.lstrip("<>=|"),
            }
            sidecar.write_text(json.dumps(meta), encoding="utf-8")
            payload.astype(payload.dtype.newbyteorder("<")).ravel(order="F").tofile(raw)
            return

        affine = np.diag([*v.spacing, 1.0])
        img = nib.Nifti1Image(payload, affine)
        img.header.set_data_dtype(payload.dtype)
        img.set_qform(affine, code=1)
        img.set_sform(affine, code=1)
        nib.save(img, str(path))
    except OSError as e:
        raise DataError(f"Could not write {path}: {e}") from e


def validate_pair(v: Volume, m: LabelVolume) -> None:
    """Check that a mask is binary and lies on its volume's grid"""
    if v.dims != m.dims:
        raise ValidationError(f"Dimension mismatch: volume {v.dims} vs mask {m.dims}")
    bad = np.argwhere(m.labels > 1)
    if bad.size:
        index = tuple(int(i) for i in bad[0])
        value = int(m.labels[index])
        raise ValidationError(f"Non-binary mask value {value} at index {index}")
