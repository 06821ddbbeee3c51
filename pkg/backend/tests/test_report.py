"""
Report tables, statistics appendix and overlays.
"""
import json

import numpy as np
import pandas as pd
import pytest
from errors import ValidationError
from models import ResultRow
from PIL import Image
from report import (
    FN_COLOR,
    FP_COLOR,
    ISBI,
    MR_MS,
    MSSEG_TEST,
    MSSEG_TRAIN,
    TP_COLOR,
    ablation_pairs,
    combined_vs_individual,
    cross_matrix,
    emit_report,
    published_rows,
    render_overlay,
    training_set_means,
)


def mixed_setting_rows():
    """Two training sets scored under two normalizations with opposite outcomes"""
    scores = [
        ("A", "B", "quantile", 0.9),
        ("B", "A", "quantile", 0.8),
        ("A", "B", "linear", 0.1),
        ("B", "A", "linear", 0.2),
    ]
    return [
        ResultRow(
            train_key=train,
            test_key=test,
            normalization=mode,
            topology="nested_dense",
            seed=0,
            dice=dice,
            iou=dice / (2 - dice),
        )
        for train, test, mode, dice in scores
    ]


@pytest.mark.unit
class TestTables:
    def test_cross_matrix_layout(self):
        matrix = cross_matrix(published_rows("cross_dataset"))
        assert matrix.shape == (4, 4)
        cell = matrix.loc[("quantile", "nested_dense", MSSEG_TEST), MSSEG_TRAIN]
        assert cell == pytest.approx(0.698)
        # Training sets never appear as their own test set
        assert pd.isna(matrix.loc[("quantile", "nested_dense", ISBI), ISBI])

    def test_combined_rows_list_their_members(self):
        rows = published_rows("cross_dataset") + published_rows("combinations")
        table = combined_vs_individual(rows)
        assert len(table) == 7
        first = table.iloc[0]
        assert first["train_key"] == f"{MSSEG_TRAIN}+{MR_MS}"
        assert f"{MSSEG_TRAIN}: 0.6020" in first["individual"]
        assert f"{MR_MS}: 0.5440" in first["individual"]

    def test_training_set_means_keep_settings_apart(self):
        means = training_set_means(mixed_setting_rows())
        assert means == {
            ("quantile", "nested_dense", "A"): pytest.approx(0.9),
            ("quantile", "nested_dense", "B"): pytest.approx(0.8),
            ("linear", "nested_dense", "A"): pytest.approx(0.1),
            ("linear", "nested_dense", "B"): pytest.approx(0.2),
        }

    def test_ablation_pairs_match_settings(self):
        pairs = ablation_pairs(published_rows("normalization"), "normalization")
        assert len(pairs) == 19
        assert set(pairs.columns) == {"quantile", "linear"}

    def test_ablation_field_must_be_known(self):
        with pytest.raises(ValidationError):
            ablation_pairs(published_rows("cross_dataset"), "seed")

    def test_unknown_published_table(self):
        with pytest.raises(ValidationError):
            published_rows("centers")


@pytest.mark.integration
class TestEmitReport:
    def test_full_report(self, tmp_path):
        rows = published_rows("cross_dataset") + published_rows("combinations")
        files = emit_report(rows, tmp_path, slice_counts={MSSEG_TRAIN: 3021})
        names = sorted(f.name for f in files)
        assert names == ["results.csv", "stats.json", "tables.txt"]

        tables = (tmp_path / "tables.txt").read_text()
        assert "Cross-dataset Dice" in tables
        assert "Combined vs individual" in tables
        assert "3021" in tables

        stats = json.loads((tmp_path / "stats.json").read_text())
        names = {entry["analysis"] for entry in stats}
        assert "anova_training_set[quantile/nested_dense]" in names
        assert len(pd.read_csv(tmp_path / "results.csv")) == len(rows)

    def test_ablation_report_runs_wilcoxon(self, tmp_path):
        emit_report(published_rows("normalization"), tmp_path)
        stats = json.loads((tmp_path / "stats.json").read_text())
        wilcoxon = [e for e in stats if e["analysis"] == "wilcoxon_normalization"]
        assert wilcoxon and wilcoxon[0]["p_value"] < 0.001

    def test_single_row_has_no_statistics(self, tmp_path):
        files = emit_report(published_rows("cross_dataset")[:1], tmp_path)
        assert not (tmp_path / "stats.json").exists()
        assert len(files) == 2

    def test_means_table_has_one_line_per_setting(self, tmp_path):
        emit_report(mixed_setting_rows(), tmp_path, slice_counts={"A": 12, "B": 7})
        tables = (tmp_path / "tables.txt").read_text()
        means = tables.split("Training-set means\n", 1)[1].split("\n\n", 1)[0]
        assert "0.9000" in means and "0.1000" in means
        assert "0.5000" not in means
        assert "quantile" in means and "linear" in means

    def test_no_rows(self, tmp_path):
        with pytest.raises(ValidationError):
            emit_report([], tmp_path)


@pytest.mark.unit
class TestOverlay:
    def test_colors_and_orientation(self, tmp_path):
        image = np.arange(16, dtype=float).reshape(4, 4)
        pred = np.zeros((4, 4), dtype=np.uint8)
        truth = np.zeros((4, 4), dtype=np.uint8)
        pred[0, 1] = truth[0, 1] = 1
        pred[2, 0] = 1
        truth[3, 3] = 1
        path = render_overlay(image, pred, truth, tmp_path / "overlay.png")

        rgb = np.asarray(Image.open(path).convert("RGB"))
        assert rgb.shape == (4, 4, 3)
        assert tuple(rgb[0, 1]) == TP_COLOR
        assert tuple(rgb[2, 0]) == FP_COLOR
        assert tuple(rgb[3, 3]) == FN_COLOR
        assert tuple(rgb[0, 0]) == (0, 0, 0)
        assert tuple(rgb[3, 2]) == (238, 238, 238)

    def test_shape_mismatch(self, tmp_path):
        with pytest.raises(ValidationError, match="equal 2D grids"):
            render_overlay(
                np.zeros((4, 4)), np.zeros((4, 4)), np.zeros((4, 5)), tmp_path / "x.png"
            )
