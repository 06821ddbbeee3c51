"""Result tables, statistics appendix and overlay images.

``PUBLISHED_TABLES`` carries the published cross-dataset figures so the
statistical analyses can be recomputed without any imaging data.
"""

import json
import logging
from collections import defaultdict
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from errors import DataError, HarnessError, ValidationError
from models import ResultRow, TestResult
from PIL import Image
from result_store import rows_frame
from stats import one_way_anova, rm_anova, tukey_hsd, wilcoxon_signed_rank

logger = logging.getLogger(__name__)

TP_COLOR = (255, 165, 0)
FP_COLOR = (255, 0, 0)
FN_COLOR = (0, 0, 255)

MSSEG_TRAIN = "MSSEG-2016-train"
MSSEG_TEST = "MSSEG-2016-test"
MR_MS = "3D-MR-MS"
ISBI = "ISBI-2015"

# Train/test pairs in the published cross-matrix order, then the combinations
_ABLATION_KEYS = [
    (MSSEG_TRAIN, MSSEG_TEST),
    (MSSEG_TRAIN, MR_MS),
    (MSSEG_TRAIN, ISBI),
    (MR_MS, MSSEG_TEST),
    (MR_MS, MSSEG_TRAIN),
    (MR_MS, ISBI),
    (MSSEG_TEST, MSSEG_TRAIN),
    (MSSEG_TEST, MR_MS),
    (MSSEG_TEST, ISBI),
    (ISBI, MSSEG_TRAIN),
    (ISBI, MSSEG_TEST),
    (ISBI, MR_MS),
    (f"{MSSEG_TRAIN}+{MR_MS}", MSSEG_TEST),
    (f"{MSSEG_TRAIN}+{MR_MS}", ISBI),
    (f"{ISBI}+{MSSEG_TRAIN}", MSSEG_TEST),
    (f"{ISBI}+{MSSEG_TRAIN}", MR_MS),
    (f"{ISBI}+{MR_MS}", MSSEG_TEST),
    (f"{ISBI}+{MR_MS}", MSSEG_TRAIN),
    (f"{MSSEG_TRAIN}+{MR_MS}+{ISBI}", MSSEG_TEST),
]
# fmt: off
_QUANTILE = [.602, .523, .569, .544, .606, .603, .698, .569, .623, .515,
             .516, .460, .624, .611, .609, .533, .581, .639, .631]
_LINEAR = [.574, .510, .535, .495, .549, .568, .662, .502, .553, .475,
           .460, .418, .650, .603, .607, .459, .558, .613, .631]
_PLAIN_SKIP = [.596, .518, .541, .518, .576, .569, .676, .529, .608, .492,
               .494, .390, .622, .594, .592, .540, .569, .626, .624]
# fmt: on

PUBLISHED_TABLES: Dict[str, List[Dict[str, Any]]] = {
    "cross_dataset": [
        {"train_key": tr, "test_key": te, "dice": d, "iou": j}
        for tr, te, d, j in [
            (MSSEG_TRAIN, MSSEG_TEST, .602, .456),
            (MSSEG_TRAIN, MR_MS, .523, .379),
            (MSSEG_TRAIN, ISBI, .569, .407),
            (MR_MS, MSSEG_TEST, .544, .406),
            (MR_MS, MSSEG_TRAIN, .606, .456),
            (MR_MS, ISBI, .603, .444),
            (MSSEG_TEST, MSSEG_TRAIN, .698, .542),
            (MSSEG_TEST, MR_MS, .569, .423),
            (MSSEG_TEST, ISBI, .623, .462),
            (ISBI, MSSEG_TRAIN, .515, .352),
            (ISBI, MSSEG_TEST, .516, .362),
            (ISBI, MR_MS, .460, .273),
        ]
    ],
    "training_means": [
        {"train_key": MSSEG_TRAIN, "dice": .564, "slices": 3021, "heterogeneous": True},
        {"train_key": MR_MS, "dice": .584, "slices": 10517, "heterogeneous": False},
        {"train_key": MSSEG_TEST, "dice": .630, "slices": 8289, "heterogeneous": True},
        {"train_key": ISBI, "dice": .497, "slices": 2843, "heterogeneous": False},
    ],
    "combinations": [
        {"train_key": tr, "test_key": te, "dice": d, "iou": j}
        for tr, te, d, j in [
            (f"{MSSEG_TRAIN}+{MR_MS}", MSSEG_TEST, .624, .478),
            (f"{MSSEG_TRAIN}+{MR_MS}", ISBI, .611, .450),
            (f"{ISBI}+{MSSEG_TRAIN}", MSSEG_TEST, .609, .463),
            (f"{ISBI}+{MSSEG_TRAIN}", MR_MS, .533, .390),
            (f"{ISBI}+{MR_MS}", MSSEG_TEST, .581, .438),
            (f"{ISBI}+{MR_MS}", MSSEG_TRAIN, .639, .484),
            (f"{MSSEG_TRAIN}+{MR_MS}+{ISBI}", MSSEG_TEST, .631, .487),
        ]
    ],
    "annotators": [
        {"label_source": src, "test_key": te, "dice": d}
        for src, values in [
            ("rater:1", (.481, .511, .394)),
            ("rater:2", (.498, .506, .423)),
            ("consensus", (.515, .516, .460)),
        ]
        for te, d in zip((MSSEG_TRAIN, MSSEG_TEST, MR_MS), values)
    ],
    "normalization": [
        {"train_key": tr, "test_key": te, "quantile": q, "linear": lin}
        for (tr, te), q, lin in zip(_ABLATION_KEYS, _QUANTILE, _LINEAR)
    ],
    "topology": [
        {"train_key": tr, "test_key": te, "nested_dense": n, "plain_skip": p}
        for (tr, te), n, p in zip(_ABLATION_KEYS, _QUANTILE, _PLAIN_SKIP)
    ],
    "centers": [
        {"center_tag": c, "dice": d}
        for c, d in [
            ("center01", 0.664),
            ("center03", 0.624),
            ("center07", 0.627),
            ("center08", 0.608),
        ]
    ],
}


def published_rows(table: str) -> List[ResultRow]:
    """Published figures of a table as ResultRows (seed 0)"""
    if table in ("cross_dataset", "combinations"):
        return [
            ResultRow(
                normalization="quantile", topology="nested_dense", seed=0, **record
            )
            for record in PUBLISHED_TABLES[table]
        ]
    if table == "normalization":
        return [
            ResultRow(
                train_key=r["train_key"],
                test_key=r["test_key"],
                normalization=mode,
                topology="nested_dense",
                seed=0,
                dice=r[mode],
                iou=r[mode] / (2 - r[mode]),
            )
            for r in PUBLISHED_TABLES[table]
            for mode in ("quantile", "linear")
        ]
    if table == "topology":
        return [
            ResultRow(
                train_key=r["train_key"],
                test_key=r["test_key"],
                normalization="quantile",
                topology=kind,
                seed=0,
                dice=r[kind],
                iou=r[kind] / (2 - r[kind]),
            )
            for r in PUBLISHED_TABLES[table]
            for kind in ("nested_dense", "plain_skip")
        ]
    if table == "annotators":
        return [
            ResultRow(
                train_key=ISBI,
                test_key=r["test_key"],
                normalization="quantile",
                topology="nested_dense",
                seed=0,
                dice=r["dice"],
                iou=r["dice"] / (2 - r["dice"]),
                label_source=r["label_source"],
            )
            for r in PUBLISHED_TABLES[table]
        ]
    raise ValidationError(f"No row form for table {table!r}")


def published_analyses() -> Dict[str, List[TestResult]]:
    """The published significance tests recomputed from PUBLISHED_TABLES"""
    groups = _group_by_train(published_rows("cross_dataset"))
    annotators = pd.DataFrame(PUBLISHED_TABLES["annotators"]).pivot(
        index="label_source", columns="test_key", values="dice"
    )
    normalization = [
        (r["quantile"], r["linear"]) for r in PUBLISHED_TABLES["normalization"]
    ]
    topology = [
        (r["nested_dense"], r["plain_skip"]) for r in PUBLISHED_TABLES["topology"]
    ]
    return {
        "anova_training_set": [one_way_anova(groups)],
        "tukey_training_set": tukey_hsd(groups),
        "rm_anova_annotators": [rm_anova(annotators.to_numpy())],
        "wilcoxon_normalization": [
            wilcoxon_signed_rank(normalization, "exact"),
            wilcoxon_signed_rank(normalization, "normal_approx"),
        ],
        "wilcoxon_topology": [
            wilcoxon_signed_rank(topology, "exact"),
            wilcoxon_signed_rank(topology, "normal_approx"),
        ],
    }


def _group_by_train(rows: Sequence[ResultRow]) -> Dict[str, List[float]]:
    groups: Dict[str, List[float]] = defaultdict(list)
    for row in rows:
        groups[row.train_key].append(row.dice)
    return dict(groups)


def _singletons(rows: Sequence[ResultRow]) -> List[ResultRow]:
    return [r for r in rows if "+" not in r.train_key]


def training_set_means(rows: Sequence[ResultRow]) -> Dict[Tuple[str, str, str], float]:
    """Mean cross-dataset Dice per (normalization, topology, single training set)"""
    means: Dict[Tuple[str, str, str], float] = {}
    for (normalization, topology), subset in _by_setting(_singletons(rows)).items():
        for key, values in _group_by_train(subset).items():
            means[(normalization, topology, key)] = float(np.mean(values))
    return means


def cross_matrix(rows: Sequence[ResultRow], value: str = "dice") -> pd.DataFrame:
    """Train x test table of the mean metric over seeds, per setting"""
    frame = rows_frame(_singletons(rows))
    return frame.pivot_table(
        index=["normalization", "topology", "train_key"],
        columns="test_key",
        values=value,
        aggfunc="mean",
        sort=False,
    )


def combined_vs_individual(rows: Sequence[ResultRow]) -> pd.DataFrame:
    """Each union-trained row next to its members' scores on the same test set"""
    mean_dice: Dict[Tuple[str, ...], List[float]] = defaultdict(list)
    for r in rows:
        mean_dice[_pair_key(r, r.train_key)].append(r.dice)

    records = []
    seen = set()
    for r in rows:
        key = _pair_key(r, r.train_key)
        if "+" not in r.train_key or key in seen:
            continue
        seen.add(key)
        individual = {}
        for member in r.train_key.split("+"):
            member_key = _pair_key(r, member)
            if member_key in mean_dice:
                individual[member] = round(float(np.mean(mean_dice[member_key])), 4)
        listing = ", ".join(f"{k}: {v:.4f}" for k, v in individual.items())
        records.append(
            {
                "train_key": r.train_key,
                "test_key": r.test_key,
                "normalization": r.normalization,
                "topology": r.topology,
                "dice": float(np.mean(mean_dice[key])),
                "individual": listing or "-",
            }
        )
    columns = [
        "train_key",
        "test_key",
        "normalization",
        "topology",
        "dice",
        "individual",
    ]
    return pd.DataFrame.from_records(records, columns=columns)


def _pair_key(row: ResultRow, train_key: str) -> Tuple[str, ...]:
    return (
        train_key,
        row.test_key,
        row.normalization,
        row.topology,
        row.label_source,
    )


def ablation_pairs(rows: Sequence[ResultRow], field: str) -> pd.DataFrame:
    """Rows matched on every key except ``field`` (normalization or topology)"""
    if field not in ("normalization", "topology"):
        raise ValidationError(f"Cannot pair rows on {field!r}")
    frame = rows_frame(rows)
    keys = (
        "train_key",
        "test_key",
        "normalization",
        "topology",
        "seed",
        "label_source",
    )
    index = [c for c in keys if c != field]
    if frame.empty:
        return pd.DataFrame()
    table = frame.pivot_table(
        index=index, columns=field, values="dice", aggfunc="first", sort=False
    )
    return table.dropna()


def _try(
    name: str, analysis: Callable[..., Any], *args: Any
) -> Tuple[str, List[TestResult], Optional[str]]:
    try:
        result = analysis(*args)
    except HarnessError as e:
        return name, [], str(e)
    return name, result if isinstance(result, list) else [result], None


def report_statistics(
    rows: Sequence[ResultRow],
) -> List[Tuple[str, List[TestResult], Optional[str]]]:
    """Every test whose table shape the rows support; skipped tests carry a reason"""
    analyses = []
    for (normalization, topology), subset in _by_setting(_singletons(rows)).items():
        setting = f"{normalization}/{topology}"
        groups = _group_by_train(subset)
        if len(groups) >= 2:
            analyses.append(
                _try(f"anova_training_set[{setting}]", one_way_anova, groups)
            )
            analyses.append(_try(f"tukey_training_set[{setting}]", tukey_hsd, groups))

    for field, (first, second) in (
        ("normalization", ("quantile", "linear")),
        ("topology", ("nested_dense", "plain_skip")),
    ):
        pairs = ablation_pairs(rows, field)
        if first in pairs.columns and second in pairs.columns and len(pairs):
            values = list(zip(pairs[first], pairs[second]))
            analyses.append(
                _try(f"wilcoxon_{field}", wilcoxon_signed_rank, values, "normal_approx")
            )
            if len(values) <= 25:
                analyses.append(
                    _try(
                        f"wilcoxon_{field}_exact", wilcoxon_signed_rank, values, "exact"
                    )
                )

    sources = {r.label_source for r in rows}
    if len(sources) >= 2:
        frame = rows_frame(rows).pivot_table(
            index="label_source", columns="test_key", values="dice", aggfunc="mean"
        )
        analyses.append(_try("rm_anova_label_source", rm_anova, frame.to_numpy()))
    return analyses


def _by_setting(rows: Sequence[ResultRow]) -> Dict[Tuple[str, str], List[ResultRow]]:
    grouped: Dict[Tuple[str, str], List[ResultRow]] = defaultdict(list)
    for row in rows:
        grouped[(row.normalization, row.topology)].append(row)
    return grouped


def _section(title: str, body: str) -> str:
    return f"{title}\n{'=' * len(title)}\n{body}\n"


def emit_report(
    rows: Sequence[ResultRow],
    out_dir: Union[str, Path],
    slice_counts: Optional[Dict[str, int]] = None,
) -> List[Path]:
    """Write results.csv, tables.txt and, for more than one row, stats.json"""
    if not rows:
        raise ValidationError("Nothing to report: no result rows")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []

    csv_path = out / "results.csv"
    rows_frame(rows).to_csv(csv_path, index=False)
    files.append(csv_path)

    sections = []
    if _singletons(rows):
        for title, metric in (
            ("Cross-dataset Dice", "dice"),
            ("Cross-dataset IoU", "iou"),
        ):
            matrix = cross_matrix(rows, metric)
            sections.append(_section(title, matrix.to_string(float_format="%.4f")))
        means = pd.Series(training_set_means(rows), name="mean_dice").to_frame()
        means.index.names = ["normalization", "topology", "train_key"]
        if slice_counts:
            train_keys = means.index.get_level_values("train_key")
            means["slices"] = pd.array(
                [slice_counts.get(k) for k in train_keys], dtype="Int64"
            )
        table = means.to_string(float_format="%.4f")
        sections.append(_section("Training-set means", table))
    combined = combined_vs_individual(rows)
    if not combined.empty:
        table = combined.to_string(index=False, float_format="%.4f")
        sections.append(_section("Combined vs individual training sets", table))
    for field in ("normalization", "topology"):
        pairs = ablation_pairs(rows, field)
        if not pairs.empty and pairs.shape[1] >= 2:
            table = pairs.to_string(float_format="%.4f")
            sections.append(_section(f"Paired by {field}", table))
    centers = [
        (r.train_key, r.test_key, c, d) for r in rows for c, d in r.per_center.items()
    ]
    if any(c != "untagged" for _, _, c, _ in centers):
        frame = pd.DataFrame(
            centers, columns=["train_key", "test_key", "center", "dice"]
        )
        by_center = frame.pivot_table(
            index=["train_key", "test_key"],
            columns="center",
            values="dice",
            aggfunc="mean",
        )
        table = by_center.to_string(float_format="%.4f")
        sections.append(_section("Per-center Dice", table))

    if len(rows) > 1:
        analyses = report_statistics(rows)
        lines = []
        payload = []
        for name, results, skipped in analyses:
            if skipped:
                lines.append(f"{name}: skipped ({skipped})")
                payload.append({"analysis": name, "skipped": skipped})
                continue
            for result in results:
                label = f" {result.label}" if result.label else ""
                lines.append(
                    f"{name}{label}: statistic={result.statistic:.4f} df={result.df} "
                    f"p={result.p_value:.4g} [{result.method}]"
                )
                payload.append({"analysis": name, **result.model_dump()})
        if lines:
            sections.append(_section("Statistics", "\n".join(lines)))
            stats_path = out / "stats.json"
            stats_path.write_text(
                json.dumps(payload, indent=2, default=str), encoding="utf-8"
            )
            files.append(stats_path)

    tables_path = out / "tables.txt"
    tables_path.write_text("\n".join(sections), encoding="utf-8")
    files.append(tables_path)
    logger.info("Report for %d rows written to %s", len(rows), out)
    return files


def _grayscale(image: np.ndarray) -> np.ndarray:
    low, high = float(image.min()), float(image.max())
    if high == low:
        return np.zeros(image.shape, dtype=np.uint8)
    return np.round((image - low) / (high - low) * 255.0).astype(np.uint8)


def render_overlay(
    image: np.ndarray, pred: np.ndarray, truth: np.ndarray, path: Union[str, Path]
) -> Path:
    """Grayscale slice with TP orange, FP red and FN blue

    Row i of the PNG is image[i].
    """
    image = np.asarray(image, dtype=np.float64)
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if image.ndim != 2 or image.shape != pred.shape or image.shape != truth.shape:
        raise ValidationError(
            f"Overlay needs equal 2D grids: image {image.shape}, "
            f"pred {pred.shape}, truth {truth.shape}"
        )
    if not np.all(np.isfinite(image)):
        raise ValidationError("Overlay image contains non-finite values")

    rgb = np.repeat(_grayscale(image)[:, :, None], 3, axis=2)
    rgb[pred & truth] = TP_COLOR
    rgb[pred & ~truth] = FP_COLOR
    rgb[~pred & truth] = FN_COLOR

    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(rgb).save(path, format="PNG")
    except OSError as e:
        raise DataError(f"Could not write overlay {path}: {e}") from e
    return path
