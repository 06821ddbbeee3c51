"""Command-line entry point: ``python main.py <subcommand> ...``.

Exit codes: 0 success, 2 validation error, 3 data error, 4 numerical failure.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import pandas as pd
from config import Config, config, configure_logging
from errors import DataError, HarnessError, ValidationError
from experiment import ExperimentRunner, preset, train_key
from harmonize import ks_distance, load_template, normalize_volumes, save_template
from manifest import ingest, load_labels, load_manifest, load_rater_masks
from metrics import (
    dataset_agreement,
    dataset_score,
    fuse_majority,
    fuse_union,
    rater_agreement,
    write_scores_csv,
)
from models import (
    DatasetManifest,
    ExperimentSpec,
    IntensityTemplate,
    Normalization,
    PhantomProfile,
    TestResult,
    TrainConfig,
)
from phantom import default_suite, generate_phantom_dataset
from pydantic import ValidationError as SchemaError
from report import emit_report, published_analyses, render_overlay
from result_store import ResultStore
from segnet import load_checkpoint, save_checkpoint, train
from slicer import slice_counts
from stats import one_way_anova, rm_anova, tukey_hsd, wilcoxon_signed_rank
from volume import LabelVolume, Volume, load_label_volume, load_volume, save_volume

logger = logging.getLogger(__name__)


def _emit(payload: Any) -> None:
    print(json.dumps(payload, indent=2, default=str))


def _settings(args: argparse.Namespace) -> Config:
    settings = Config.from_json(args.config, config) if args.config else config
    overrides = {}
    if args.seed is not None:
        overrides["HARNESS_SEED"] = args.seed
    if args.out is not None:
        overrides["RESULTS_DIR"] = args.out
    if args.jobs is not None:
        overrides["JOBS"] = args.jobs
    return settings.updated(**overrides)


def _manifests(paths: Sequence[str]) -> Dict[str, DatasetManifest]:
    manifests: Dict[str, DatasetManifest] = {}
    for path in paths:
        manifest = load_manifest(path)
        if manifest.dataset_id in manifests:
            raise ValidationError(f"Dataset {manifest.dataset_id} given twice")
        manifests[manifest.dataset_id] = manifest
    return manifests


def _train_config(args: argparse.Namespace, settings: Config) -> TrainConfig:
    base = TrainConfig(seed=settings.HARNESS_SEED)
    if getattr(args, "train_config", None):
        text = Path(args.train_config).read_text(encoding="utf-8")
        base = TrainConfig(**json.loads(text))
    updates: Dict[str, Any] = {}
    if getattr(args, "epochs", None):
        updates["epochs"] = args.epochs
    if getattr(args, "topology", None):
        updates["topology"] = base.topology.model_copy(update={"kind": args.topology})
    return base.model_copy(update=updates)


def cmd_ingest(args: argparse.Namespace, settings: Config) -> None:
    reports = []
    for path in args.manifests:
        report = ingest(
            load_manifest(path), settings.MIN_BRAIN_VOXELS, load_data=not args.no_load
        )
        reports.append(report.__dict__)
    _emit(reports)


def cmd_phantom(args: argparse.Namespace, settings: Config) -> None:
    if args.profile:
        text = Path(args.profile).read_text(encoding="utf-8")
        profiles = [PhantomProfile(**json.loads(text))]
    else:
        profiles = default_suite(settings.HARNESS_SEED, tuple(args.dims))
    out = Path(settings.RESULTS_DIR)
    written = {}
    for profile in profiles:
        if args.raters:
            profile = profile.model_copy(update={"rater_count": args.raters})
        _, files = generate_phantom_dataset(profile, args.scans, out)
        written[profile.site_id] = str(files[-1])
    _emit(written)


def cmd_normalize(args: argparse.Namespace, settings: Config) -> None:
    manifests = _manifests(args.manifests)
    runner = ExperimentRunner(manifests, settings)
    volumes = [v for d in manifests for v, _ in runner.scans(d)]
    out = Path(settings.RESULTS_DIR)
    template: Optional[IntensityTemplate] = None
    if args.method == "quantile":
        if args.template:
            template = load_template(args.template)
        else:
            template = runner.template_for(volumes)
        save_template(template, out / "template.json")
    normalized = normalize_volumes(volumes, args.method, template, settings.JOBS)
    distances = {}
    for v in normalized:
        name = f"{v.provenance.scan_id}_{args.method}.nii.gz"
        save_volume(v, out / v.provenance.dataset_id / name)
        if template is not None:
            distances[v.provenance.scan_id] = ks_distance(v, template)
    _emit({"normalized": len(normalized), "ks_distance": distances})


def _prepare(
    runner: ExperimentRunner,
    dataset_ids: Sequence[str],
    normalization: Normalization,
    template: Optional[IntensityTemplate],
    label_source: str = "consensus",
) -> Tuple[List[Tuple[Volume, LabelVolume]], List[Volume]]:
    pairs = [p for d in dataset_ids for p in runner.scans(d, label_source)]
    volumes = normalize_volumes([v for v, _ in pairs], normalization, template)
    return pairs, volumes


def cmd_train(args: argparse.Namespace, settings: Config) -> None:
    manifests = _manifests(args.manifests)
    runner = ExperimentRunner(manifests, settings)
    cfg = _train_config(args, settings)
    pairs = [p for d in manifests for p in runner.scans(d, args.label_source)]
    template: Optional[IntensityTemplate] = None
    if args.normalization == "quantile":
        template = runner.template_for([v for v, _ in pairs])
    volumes = normalize_volumes([v for v, _ in pairs], args.normalization, template)
    samples = [s for v, (_, m) in zip(volumes, pairs) for s in runner.slices(v, m)]
    logger.info("Training on %s: %s", train_key(list(manifests)), slice_counts(samples))

    result = train(samples, cfg, progress=True)
    out = Path(settings.RESULTS_DIR)
    save_checkpoint(
        result.model, out / "model", cfg, result.best_epoch, result.best_val_dice
    )
    if template is not None:
        save_template(template, out / "template.json")
    _emit(
        {
            "checkpoint": str(out / "model.json"),
            "best_epoch": result.best_epoch,
            "best_val_dice": result.best_val_dice,
            "log": [e.__dict__ for e in result.log],
        }
    )


def cmd_evaluate(args: argparse.Namespace, settings: Config) -> None:
    manifests = _manifests(args.manifests)
    runner = ExperimentRunner(manifests, settings)
    model, meta = load_checkpoint(args.checkpoint)
    cfg = TrainConfig(**meta["config"]) if meta.get("config") else TrainConfig()
    template: Optional[IntensityTemplate] = None
    if args.normalization == "quantile":
        if not args.template:
            raise ValidationError("Quantile evaluation needs --template")
        template = load_template(args.template)

    results: Dict[str, Dict[str, float]] = {}
    for dataset_id in manifests:
        pairs, volumes = _prepare(runner, [dataset_id], args.normalization, template)
        scores = runner.score_scans(model, pairs, volumes, cfg)
        scores_path = Path(settings.RESULTS_DIR) / "scores.csv"
        write_scores_csv(scores, scores_path, args.checkpoint, dataset_id)
        dice, iou = dataset_score(scores)
        results[dataset_id] = {"dice": dice, "iou": iou, "scans": len(scores)}
    _emit(results)


def cmd_matrix(args: argparse.Namespace, settings: Config) -> None:
    if args.spec:
        try:
            text = Path(args.spec).read_text(encoding="utf-8")
            spec = ExperimentSpec(**json.loads(text))
        except SchemaError as e:
            raise ValidationError(f"Invalid experiment spec {args.spec}: {e}") from e
    else:
        spec = preset(args.preset)
    if args.epochs:
        train_config = spec.train_config.model_copy(update={"epochs": args.epochs})
        spec = spec.model_copy(update={"train_config": train_config})
    if args.seed is not None:
        spec = spec.model_copy(update={"seeds": [args.seed]})

    out = Path(settings.RESULTS_DIR)
    store = ResultStore(out / "results.csv")
    runner = ExperimentRunner(
        _manifests(args.manifests), settings, store, out / "scores.csv"
    )
    rows = runner.run_matrix(spec, jobs=settings.JOBS, progress=True)
    files = emit_report(rows, out / "report")
    _emit({"rows": len(rows), "files": [str(f) for f in files]})


def _column_groups(frame: pd.DataFrame) -> Dict[str, List[float]]:
    return {str(c): frame[c].dropna().astype(float).tolist() for c in frame.columns}


STAT_TESTS: Dict[str, Callable[..., List[TestResult]]] = {
    "anova": lambda frame, mode: [one_way_anova(_column_groups(frame))],
    "tukey": lambda frame, mode: tukey_hsd(_column_groups(frame)),
    "wilcoxon": lambda frame, mode: [
        wilcoxon_signed_rank(frame.iloc[:, :2].dropna().to_numpy(dtype=float), mode)
    ],
    # Columns are conditions, rows are subjects
    "rm_anova": lambda frame, mode: [rm_anova(frame.to_numpy(dtype=float).T)],
}


def cmd_stats(args: argparse.Namespace, settings: Config) -> None:
    if args.published:
        analyses = published_analyses()
        _emit({name: [r.model_dump() for r in rs] for name, rs in analyses.items()})
        return
    if not args.test or not args.input:
        raise ValidationError("stats needs a test name and --input CSV, or --published")
    try:
        frame = pd.read_csv(args.input)
    except FileNotFoundError as e:
        raise ValidationError(f"Input not found: {args.input}") from e
    if args.wilcoxon_mode and args.test != "wilcoxon":
        raise ValidationError("--mode applies to wilcoxon only")
    results = STAT_TESTS[args.test](frame, args.wilcoxon_mode or "normal_approx")
    _emit([r.model_dump() for r in results])


def cmd_agree(args: argparse.Namespace, settings: Config) -> None:
    manifest = load_manifest(args.manifest)
    records = []
    for entry in manifest.entries:
        masks = load_rater_masks(manifest, entry)
        consensus = load_labels(manifest, entry) if entry.consensus_path else None
        records.append(rater_agreement(masks, consensus, entry.scan_id))
    summary = dataset_agreement(records)
    _emit(
        {
            "dataset": manifest.dataset_id,
            "pairwise_dice": summary.pairwise_dice,
            "consensus_dice": summary.consensus_dice,
            "scans": [
                {
                    "scan_id": r.scan_id,
                    "pairwise_dice": r.pairwise_dice,
                    "consensus_dice": r.consensus_dice,
                }
                for r in records
            ],
        }
    )


def cmd_fuse(args: argparse.Namespace, settings: Config) -> None:
    manifest = load_manifest(args.manifest)
    out = Path(settings.RESULTS_DIR) / manifest.dataset_id
    written = []
    for entry in manifest.entries:
        masks = load_rater_masks(manifest, entry)
        if args.method == "union":
            fused = fuse_union(masks)
        else:
            fused = fuse_majority(masks, args.k or len(masks) // 2 + 1)
        path = out / f"{entry.scan_id}_{fused.provenance.rater_id}.nii.gz"
        save_volume(fused, path)
        written.append(str(path))
    _emit(written)


def cmd_overlay(args: argparse.Namespace, settings: Config) -> None:
    image = load_volume(args.image).voxels
    pred = load_label_volume(args.pred).labels
    truth = load_label_volume(args.truth).labels
    if not 0 <= args.z < image.shape[2]:
        raise ValidationError(f"Slice {args.z} outside 0..{image.shape[2] - 1}")
    path = Path(settings.RESULTS_DIR) / (args.name or f"overlay_z{args.z:03d}.png")
    render_overlay(image[:, :, args.z], pred[:, :, args.z], truth[:, :, args.z], path)
    _emit(str(path))


def cmd_report(args: argparse.Namespace, settings: Config) -> None:
    rows = ResultStore(args.results).rows()
    counts = None
    if args.slice_counts:
        counts = json.loads(Path(args.slice_counts).read_text(encoding="utf-8"))
    files = emit_report(rows, Path(settings.RESULTS_DIR), counts)
    _emit([str(f) for f in files])


COMMANDS: Dict[str, Callable[[argparse.Namespace, Config], None]] = {
    "ingest": cmd_ingest,
    "phantom": cmd_phantom,
    "normalize": cmd_normalize,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "matrix": cmd_matrix,
    "stats": cmd_stats,
    "agree": cmd_agree,
    "fuse": cmd_fuse,
    "overlay": cmd_overlay,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lesionbench",
        description=(
            "Cross-dataset generalizability harness for FLAIR lesion segmentation"
        ),
    )
    parser.add_argument("--seed", type=int, help="Base seed (default: HARNESS_SEED)")
    parser.add_argument(
        "--config", help="JSON file overlaid on the environment settings"
    )
    parser.add_argument("--out", help="Output directory (default: RESULTS_DIR)")
    parser.add_argument("--jobs", type=int, help="Parallel matrix rows (default: JOBS)")
    parser.add_argument(
        "--log-level", default=None, help="Logging level (default: LOG_LEVEL)"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="Validate manifests and count slices")
    p.add_argument("manifests", nargs="+")
    p.add_argument("--no-load", action="store_true", help="Only check that files exist")

    p = sub.add_parser("phantom", help="Generate the synthetic multi-site suite")
    p.add_argument(
        "--profile", help="PhantomProfile JSON (default: built-in 4-site suite)"
    )
    p.add_argument("--scans", type=int, default=6)
    p.add_argument("--dims", type=int, nargs=3, default=[64, 64, 24])
    p.add_argument("--raters", type=int, default=0, help="Simulated raters per scan")

    p = sub.add_parser("normalize", help="Normalize every scan of the given datasets")
    p.add_argument("manifests", nargs="+")
    p.add_argument("--method", choices=["quantile", "linear"], default="quantile")
    p.add_argument(
        "--template", help="Existing template JSON (default: build from the data)"
    )

    for name, text in (
        ("train", "Train one model"),
        ("evaluate", "Score a checkpoint"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("manifests", nargs="+")
        p.add_argument(
            "--normalization", choices=["quantile", "linear"], default="quantile"
        )
    train_p = sub.choices["train"]
    train_p.add_argument("--topology", choices=["plain_skip", "nested_dense"])
    train_p.add_argument("--epochs", type=int)
    train_p.add_argument("--label-source", default="consensus")
    train_p.add_argument("--train-config", help="TrainConfig JSON")
    eval_p = sub.choices["evaluate"]
    eval_p.add_argument("--checkpoint", required=True)
    eval_p.add_argument("--template")

    p = sub.add_parser("matrix", help="Run a train/test matrix with resume")
    p.add_argument("manifests", nargs="+")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--spec", help="ExperimentSpec JSON")
    group.add_argument("--preset", help="Built-in spec name")
    p.add_argument("--epochs", type=int, help="Override the spec's epoch count")

    p = sub.add_parser("stats", help="Run a statistical test on CSV columns")
    p.add_argument("test", nargs="?", choices=sorted(STAT_TESTS))
    p.add_argument("--input", help="CSV; one column per group or condition")
    p.add_argument("--mode", dest="wilcoxon_mode", choices=["exact", "normal_approx"])
    p.add_argument(
        "--published", action="store_true", help="Recompute the published analyses"
    )

    p = sub.add_parser("agree", help="Rater agreement of a dataset")
    p.add_argument("manifest")

    p = sub.add_parser("fuse", help="Fuse rater masks")
    p.add_argument("manifest")
    p.add_argument("--method", choices=["union", "majority"], default="union")
    p.add_argument("--k", type=int, help="Vote threshold (default: strict majority)")

    p = sub.add_parser("overlay", help="Render TP/FP/FN colors on one axial slice")
    p.add_argument("--image", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--z", type=int, required=True)
    p.add_argument("--name", help="PNG file name")

    p = sub.add_parser("report", help="Tables and statistics from a results CSV")
    p.add_argument("results")
    p.add_argument("--slice-counts", help="JSON map dataset_id -> slice count")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        settings = _settings(args)
        configure_logging(args.log_level or settings.LOG_LEVEL)
        COMMANDS[args.command](args, settings)
    except HarnessError as e:
        logger.error("%s", e)
        return e.exit_code
    except (SchemaError, json.JSONDecodeError) as e:
        logger.error("Invalid input: %s", e)
        return ValidationError.exit_code
    except FileNotFoundError as e:
        logger.error("%s", e)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
