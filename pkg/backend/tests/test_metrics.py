"""
Overlap metrics, aggregation, rater agreement and fusion.
"""
import logging

import numpy as np
import pandas as pd
import pytest
from errors import ValidationError
from metrics import (
    SCORE_COLUMNS,
    confusion,
    dataset_agreement,
    dataset_score,
    dice,
    fuse_majority,
    fuse_union,
    iou,
    rater_agreement,
    scan_score,
    write_scores_csv,
)
from volume import LabelVolume, ScanProvenance


def _masks(seed: int, count: int, shape=(8, 8), p: float = 0.3):
    rng = np.random.default_rng(seed)
    return [(rng.random(shape) < p).astype(np.uint8) for _ in range(count)]


def _label(mask: np.ndarray, rater: str = "1") -> LabelVolume:
    return LabelVolume(
        labels=mask.reshape(mask.shape + (1,) * (3 - mask.ndim)),
        provenance=ScanProvenance(scan_id="s0", rater_id=rater),
    )


@pytest.mark.acceptance
class TestOverlapOracle:
    def test_random_pairs_match_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            density = rng.uniform(0, 0.5)
            pred = rng.random((16, 16)) < density
            truth = rng.random((16, 16)) < density
            tp = fp = fn = 0
            for a, b in zip(pred.ravel(), truth.ravel()):
                tp += bool(a and b)
                fp += bool(a and not b)
                fn += bool(b and not a)

            counts = confusion(pred, truth)
            assert (counts.tp, counts.fp, counts.fn) == (tp, fp, fn)
            assert counts.total == 256
            if tp + fp + fn == 0:
                assert dice(counts) == iou(counts) == 1.0
                continue
            assert dice(counts) == pytest.approx(2 * tp / (2 * tp + fp + fn))
            assert iou(counts) == pytest.approx(tp / (tp + fp + fn))
            assert dice(counts) == pytest.approx(2 * iou(counts) / (1 + iou(counts)))


@pytest.mark.unit
class TestOverlap:
    def test_both_empty_is_perfect(self):
        counts = confusion(np.zeros((4, 4)), np.zeros((4, 4)))
        assert dice(counts) == 1.0
        assert iou(counts) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError, match="mismatch"):
            confusion(np.zeros((4, 4)), np.zeros((4, 5)))

    def test_label_volumes_accepted(self):
        mask = _masks(1, 1)[0]
        assert dice(confusion(_label(mask), _label(mask))) == 1.0


@pytest.mark.unit
class TestScanScore:
    def test_counts_pool_across_slices(self):
        truth = [np.ones((2, 2)), np.zeros((2, 2))]
        pred = [np.ones((2, 2)), np.ones((2, 2))]
        score = scan_score(pred, truth, "s0")
        # 4 TP, 4 FP: pooled Dice is 8/12, not the mean of per-slice values
        assert score.dice == pytest.approx(2 / 3)
        assert score.counts.tp == 4
        assert not score.empty_truth

    def test_keyed_slices_must_agree(self):
        with pytest.raises(ValidationError, match="z indices"):
            scan_score({0: np.zeros((2, 2))}, {1: np.zeros((2, 2))}, "s0")

    def test_slice_count_mismatch(self):
        with pytest.raises(ValidationError):
            scan_score([np.zeros((2, 2))], [np.zeros((2, 2))] * 2, "s0")

    def test_empty_truth_flagged(self):
        score = scan_score([np.ones((2, 2))], [np.zeros((2, 2))], "s0")
        assert score.empty_truth
        assert score.dice == 0.0


@pytest.mark.unit
class TestDatasetScore:
    def test_empty_truth_scans_excluded_with_warning(self, caplog):
        good = scan_score([np.ones((2, 2))], [np.ones((2, 2))], "a")
        half = scan_score(
            [np.array([[1, 0], [0, 0]])], [np.array([[1, 1], [0, 0]])], "b"
        )
        empty = scan_score([np.ones((2, 2))], [np.zeros((2, 2))], "c")
        with caplog.at_level(logging.WARNING):
            mean_dice, mean_iou = dataset_score([good, half, empty])
        assert mean_dice == pytest.approx((1.0 + 2 / 3) / 2)
        assert mean_iou == pytest.approx((1.0 + 0.5) / 2)
        assert "Excluded 1" in caplog.text

    def test_all_empty(self):
        empty = scan_score([np.zeros((2, 2))], [np.zeros((2, 2))], "c")
        with pytest.raises(ValidationError, match="empty ground truth"):
            dataset_score([empty, empty])


@pytest.mark.unit
class TestAgreement:
    def test_identical_raters_agree_fully(self):
        mask = _masks(2, 1)[0]
        record = rater_agreement([mask, mask, mask], consensus=mask, scan_id="s0")
        assert record.pairwise_dice == 1.0
        assert record.consensus_dice == 1.0
        assert set(record.pairs) == {(0, 1), (0, 2), (1, 2)}

    def test_pairwise_mean(self):
        a = np.array([[1, 1], [0, 0]])
        b = np.array([[1, 0], [0, 0]])
        record = rater_agreement([a, b])
        assert record.pairwise_dice == pytest.approx(2 / 3)
        assert record.consensus_dice is None

    def test_single_rater(self):
        with pytest.raises(ValidationError):
            rater_agreement([np.zeros((2, 2))])

    def test_rater_shapes_differ(self):
        with pytest.raises(ValidationError, match="different shapes"):
            rater_agreement([np.zeros((2, 2)), np.zeros((3, 3))])

    def test_dataset_mean(self):
        records = [
            rater_agreement(
                [np.ones((2, 2)), np.ones((2, 2))], consensus=np.ones((2, 2))
            ),
            rater_agreement([np.array([[1, 1], [0, 0]]), np.array([[1, 0], [0, 0]])]),
        ]
        summary = dataset_agreement(records)
        assert summary.pairwise_dice == pytest.approx((1.0 + 2 / 3) / 2)
        assert summary.consensus_dice == 1.0


@pytest.mark.acceptance
class TestFusion:
    def test_union_and_majority_bounds(self):
        raters = [_label(m, str(r)) for r, m in enumerate(_masks(3, 3), start=1)]
        union = fuse_union(raters)
        for rater in raters:
            assert np.all(union.labels >= rater.labels)
        everyone = np.logical_and.reduce([r.labels > 0 for r in raters])
        np.testing.assert_array_equal(
            fuse_majority(raters, 3).labels, everyone.astype(np.uint8)
        )
        np.testing.assert_array_equal(fuse_majority(raters, 1).labels, union.labels)
        assert fuse_majority(raters, 2).provenance.rater_id == "majority2"

    @pytest.mark.parametrize("k", [0, 4])
    def test_threshold_outside_rater_count(self, k):
        raters = [_label(m) for m in _masks(4, 3)]
        with pytest.raises(ValidationError, match="outside"):
            fuse_majority(raters, k)

    def test_no_masks(self):
        with pytest.raises(ValidationError):
            fuse_union([])


@pytest.mark.unit
def test_scores_csv_appends_below_one_header(tmp_path):
    scores = [
        scan_score([np.ones((2, 2))], [np.ones((2, 2))], "a"),
        scan_score([np.ones((2, 2))], [np.zeros((2, 2))], "b"),
    ]
    path = tmp_path / "scores.csv"
    write_scores_csv(scores, path, "siteA", "siteB")
    write_scores_csv(scores, path, "siteA", "siteC")
    frame = pd.read_csv(path)
    assert list(frame.columns) == SCORE_COLUMNS
    assert len(frame) == 4
    assert frame["excluded"].tolist() == [False, True, False, True]
    assert frame["test_set"].tolist() == ["siteB", "siteB", "siteC", "siteC"]
