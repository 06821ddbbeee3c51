"""Intensity normalization of skull-stripped scans.

Quantile normalization maps the nonzero (brain) voxels of a scan onto a
template quantile curve by their average fractional ranks; linear
normalization rescales the whole volume to [0, 1]. Exactly-zero voxels are
background and stay zero under quantile normalization.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Literal, Sequence, Union

import numpy as np
from errors import DataError, ValidationError
from models import IntensityTemplate
from pydantic import ValidationError as SchemaError
from scipy.stats import rankdata
from volume import Volume

logger = logging.getLogger(__name__)

DEFAULT_RESOLUTION = 1024


def _brain_values(v: Volume) -> np.ndarray:
    values = v.voxels[v.voxels != 0]
    if values.size == 0:
        raise ValidationError(f"Volume {v.provenance.scan_id or '?'} is all zero")
    return values


def _rank_grid(M: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, M)


def build_template(
    volumes: Sequence[Volume], M: int = DEFAULT_RESOLUTION
) -> IntensityTemplate:
    """Average the per-scan quantile curves of the nonzero voxels"""
    if not volumes:
        raise ValidationError("Cannot build a template from an empty volume list")
    if M < 2:
        raise ValidationError(f"Template resolution must be >= 2, got {M}")

    grid = _rank_grid(M)
    curves = []
    for v in volumes:
        values = v.voxels[v.voxels != 0]
        if values.size < M:
            raise ValidationError(
                f"Volume {v.provenance.scan_id or '?'} has {values.size} nonzero "
                f"voxels, template resolution needs {M}"
            )
        curves.append(np.quantile(values, grid))

    quantiles = np.maximum.accumulate(np.mean(curves, axis=0))
    return IntensityTemplate(
        quantiles=quantiles.tolist(),
        source_ids=[v.provenance.scan_id for v in volumes],
    )


def rescale_template(t: IntensityTemplate, high: float = 1.0) -> IntensityTemplate:
    """Scale the template so its top quantile equals ``high``"""
    top = t.quantiles[-1]
    if top <= 0:
        raise ValidationError("Cannot rescale a template whose quantiles are all zero")
    scaled = np.asarray(t.quantiles) * (high / top)
    return IntensityTemplate(quantiles=scaled.tolist(), source_ids=list(t.source_ids))


def quantile_normalize(v: Volume, t: IntensityTemplate) -> Volume:
    """Map nonzero voxels onto the template by average fractional rank"""
    brain = v.voxels != 0
    values = _brain_values(v)

    if values.size == 1:
        fractional = np.array([0.5])
    else:
        fractional = (rankdata(values, method="average") - 1.0) / (values.size - 1)

    out = np.zeros_like(v.voxels)
    out[brain] = np.interp(fractional, _rank_grid(t.M), np.asarray(t.quantiles))
    return v.with_voxels(out)


def linear_normalize(v: Volume) -> Volume:
    """Rescale all voxels, background included, to [0, 1]"""
    low = float(v.voxels.min())
    high = float(v.voxels.max())
    if high == low:
        raise ValidationError(
            f"Volume {v.provenance.scan_id or '?'} is constant; cannot rescale"
        )
    return v.with_voxels((v.voxels - low) / (high - low))


def ks_distance(v: Volume, t: IntensityTemplate) -> float:
    """Kolmogorov-Smirnov distance between brain voxels and the template CDF"""
    values = np.sort(_brain_values(v))
    points = np.unique(values)
    n = values.size

    template_cdf = np.interp(points, np.asarray(t.quantiles), _rank_grid(t.M))
    right = np.searchsorted(values, points, side="right") / n
    left = np.searchsorted(values, points, side="left") / n

    distance = max(
        float(np.max(right - template_cdf)), float(np.max(template_cdf - left))
    )
    return min(max(distance, 0.0), 1.0)


def normalize_volumes(
    volumes: Sequence[Volume],
    method: Literal["quantile", "linear"],
    template: Union[IntensityTemplate, None] = None,
    jobs: int = 1,
) -> List[Volume]:
    """Normalize many scans; thread-parallel, order preserved"""
    if method == "quantile":
        if template is None:
            raise ValidationError("Quantile normalization needs a template")

        def work(v: Volume) -> Volume:
            return quantile_normalize(v, template)

    elif method == "linear":
        work = linear_normalize
    else:
        raise ValidationError(f"Unknown normalization {method!r}")

    if jobs <= 1:
        return [work(v) for v in volumes]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(work, volumes))


def save_template(t: IntensityTemplate, path: Union[str, Path]) -> None:
    payload = {"M": t.M, "quantiles": t.quantiles, "source_ids": t.source_ids}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(payload, indent=2), encoding="utf-8")


def load_template(path: Union[str, Path]) -> IntensityTemplate:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise DataError(f"Template not found: {path}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"Template {path} is not valid JSON: {e}") from e

    try:
        template = IntensityTemplate(
            quantiles=payload["quantiles"], source_ids=payload.get("source_ids", [])
        )
    except (KeyError, SchemaError) as e:
        raise ValidationError(f"Invalid template {path}: {e}") from e
    if "M" in payload and payload["M"] != template.M:
        raise ValidationError(
            f"Template {path} declares M={payload['M']} but has {template.M} quantiles"
        )
    return template
