"""Overlap metrics, per-scan aggregation, rater agreement and label fusion."""

import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from errors import ValidationError
from volume import LabelVolume, ScanProvenance

logger = logging.getLogger(__name__)

SCORE_COLUMNS = [
    "train_set",
    "test_set",
    "scan_id",
    "dice",
    "iou",
    "tp",
    "fp",
    "fn",
    "tn",
    "excluded",
]

Grid = Union[np.ndarray, LabelVolume]
SliceSet = Union[Sequence[np.ndarray], Mapping[int, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp,
            self.fp + other.fp,
            self.fn + other.fn,
            self.tn + other.tn,
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class ScanScore:
    scan_id: str
    dice: float
    iou: float
    counts: ConfusionCounts
    empty_truth: bool = False  # Excluded from dataset aggregation


def _as_array(grid: Grid) -> np.ndarray:
    return grid.labels if isinstance(grid, LabelVolume) else np.asarray(grid)


def confusion(pred: Grid, truth: Grid) -> ConfusionCounts:
    """Exact pixel counts of a predicted against a reference mask"""
    p = _as_array(pred).astype(bool)
    t = _as_array(truth).astype(bool)
    if p.shape != t.shape:
        raise ValidationError(
            f"Shape mismatch: prediction {p.shape} vs truth {t.shape}"
        )
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=int(p.size) - tp - fp - fn)


def dice(c: ConfusionCounts) -> float:
    """2TP / (2TP + FP + FN); 1.0 when both masks are empty"""
    denominator = 2 * c.tp + c.fp + c.fn
    return 1.0 if denominator == 0 else 2.0 * c.tp / denominator


def iou(c: ConfusionCounts) -> float:
    """TP / (TP + FP + FN); 1.0 when both masks are empty"""
    denominator = c.tp + c.fp + c.fn
    return 1.0 if denominator == 0 else c.tp / denominator


def _aligned(
    pred: SliceSet, truth: SliceSet, scan_id: str
) -> List[Tuple[np.ndarray, np.ndarray]]:
    if isinstance(pred, Mapping) or isinstance(truth, Mapping):
        if not (isinstance(pred, Mapping) and isinstance(truth, Mapping)):
            raise ValidationError(
                f"Scan {scan_id}: mixed keyed and positional slice sets"
            )
        if set(pred) != set(truth):
            raise ValidationError(
                f"Scan {scan_id}: predicted and truth z indices differ"
            )
        return [(pred[z], truth[z]) for z in sorted(pred)]
    if len(pred) != len(truth):
        raise ValidationError(
            f"Scan {scan_id}: {len(pred)} predicted slices vs {len(truth)} truth slices"
        )
    return list(zip(pred, truth))


def scan_score(
    pred_slices: SliceSet, truth_slices: SliceSet, scan_id: str
) -> ScanScore:
    """Pool confusion counts over a scan's slices, then score"""
    pairs = _aligned(pred_slices, truth_slices, scan_id)
    counts = ConfusionCounts()
    for pred, truth in pairs:
        counts = counts + confusion(pred, truth)
    return ScanScore(
        scan_id=scan_id,
        dice=dice(counts),
        iou=iou(counts),
        counts=counts,
        empty_truth=(counts.tp + counts.fn) == 0,
    )


def dataset_score(scores: Sequence[ScanScore]) -> Tuple[float, float]:
    """Unweighted mean Dice and IoU over scans with a nonempty ground truth"""
    kept = [s for s in scores if not s.empty_truth]
    if not kept:
        raise ValidationError(
            "Every scan has an empty ground truth; nothing to aggregate"
        )
    excluded = len(scores) - len(kept)
    if excluded:
        logger.warning("Excluded %d scan(s) with empty ground truth", excluded)
    return (
        float(np.mean([s.dice for s in kept])),
        float(np.mean([s.iou for s in kept])),
    )


@dataclass
class AgreementRecord:
    """Rater agreement for one scan, or its mean over a dataset"""

    scan_id: str
    pairwise_dice: float  # Mean Dice over rater pairs i < j
    pairs: Dict[Tuple[int, int], float] = field(default_factory=dict)
    consensus_dice: Optional[float] = None  # Mean Dice(rater_i, consensus)


def _check_dims(masks: Sequence[Grid]) -> List[np.ndarray]:
    arrays = [_as_array(m) for m in masks]
    shapes = {a.shape for a in arrays}
    if len(shapes) > 1:
        raise ValidationError(f"Rater masks have different shapes: {sorted(shapes)}")
    return arrays


def rater_agreement(
    masks: Sequence[Grid], consensus: Optional[Grid] = None, scan_id: str = ""
) -> AgreementRecord:
    """Mean pairwise Dice between raters, and against a consensus if given"""
    if len(masks) < 2:
        raise ValidationError("Rater agreement needs at least 2 raters")
    arrays = _check_dims(list(masks) + ([consensus] if consensus is not None else []))
    raters = arrays[: len(masks)]

    pairs = {
        (i, j): dice(confusion(raters[i], raters[j]))
        for i, j in itertools.combinations(range(len(raters)), 2)
    }
    record = AgreementRecord(
        scan_id=scan_id,
        pairwise_dice=float(np.mean(list(pairs.values()))),
        pairs=pairs,
    )
    if consensus is not None:
        reference = arrays[-1]
        record.consensus_dice = float(
            np.mean([dice(confusion(r, reference)) for r in raters])
        )
    return record


def dataset_agreement(records: Sequence[AgreementRecord]) -> AgreementRecord:
    """Mean of per-scan agreement values"""
    if not records:
        raise ValidationError("No scans to aggregate")
    with_consensus = [r.consensus_dice for r in records if r.consensus_dice is not None]
    return AgreementRecord(
        scan_id="*",
        pairwise_dice=float(np.mean([r.pairwise_dice for r in records])),
        consensus_dice=float(np.mean(with_consensus)) if with_consensus else None,
    )


def _fused(
    masks: Sequence[LabelVolume], labels: np.ndarray, rater_id: str
) -> LabelVolume:
    first = masks[0]
    prov = first.provenance
    return LabelVolume(
        labels=labels.astype(np.uint8),
        spacing=first.spacing,
        provenance=ScanProvenance(
            dataset_id=prov.dataset_id,
            patient_id=prov.patient_id,
            scan_id=prov.scan_id,
            modality=prov.modality,
            rater_id=rater_id,
        ),
        orientation_unknown=first.orientation_unknown,
        axis_permutation=first.axis_permutation,
    )


def fuse_union(masks: Sequence[LabelVolume]) -> LabelVolume:
    """Pixelwise OR of rater masks"""
    if not masks:
        raise ValidationError("Fusion needs at least one mask")
    arrays = _check_dims(masks)
    return _fused(masks, np.logical_or.reduce([a > 0 for a in arrays]), "union")


def fuse_majority(masks: Sequence[LabelVolume], k: int) -> LabelVolume:
    """1 where at least k raters mark the voxel"""
    if not masks:
        raise ValidationError("Fusion needs at least one mask")
    if not 1 <= k <= len(masks):
        raise ValidationError(f"Vote threshold k={k} outside 1..{len(masks)}")
    arrays = _check_dims(masks)
    votes = np.sum([a > 0 for a in arrays], axis=0)
    return _fused(masks, votes >= k, f"majority{k}")


def scores_frame(
    scores: Sequence[ScanScore], train_set: str = "", test_set: str = ""
) -> pd.DataFrame:
    records = [
        {
            "train_set": train_set,
            "test_set": test_set,
            "scan_id": s.scan_id,
            "dice": s.dice,
            "iou": s.iou,
            "tp": s.counts.tp,
            "fp": s.counts.fp,
            "fn": s.counts.fn,
            "tn": s.counts.tn,
            "excluded": s.empty_truth,
        }
        for s in scores
    ]
    return pd.DataFrame.from_records(records, columns=SCORE_COLUMNS)


def write_scores_csv(
    scores: Sequence[ScanScore],
    path: Union[str, Path],
    train_set: str = "",
    test_set: str = "",
) -> None:
    """Append per-scan scores to a CSV, writing the header for a new file"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = scores_frame(scores, train_set, test_set)
    frame.to_csv(path, mode="a", header=not path.exists(), index=False)
