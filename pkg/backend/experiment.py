"""Cross-dataset train/test matrix: plan, run, persist.

Every row of the matrix trains one model on a training set (a single dataset
or a union) and scores it on one held-out dataset. Rows are independent and
may run in worker processes; only the parent process writes results.
"""

import logging
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from config import Config, config
from errors import ValidationError
from harmonize import build_template, normalize_volumes, rescale_template
from manifest import load_scan
from metrics import ScanScore, dataset_score, scan_score, write_scores_csv
from models import (
    DatasetManifest,
    ExperimentSpec,
    IntensityTemplate,
    Normalization,
    ResultRow,
    TopologyKind,
    TrainConfig,
)
from result_store import ResultStore
from segnet import SegNet, TrainingResult, predict, train
from slicer import SliceSample, extract_slices
from tqdm import tqdm
from volume import LabelVolume, Volume

logger = logging.getLogger(__name__)

UNTAGGED = "untagged"

PUBLISHED_DATASETS = ["MSSEG-2016-train", "MSSEG-2016-test", "3D-MR-MS", "ISBI-2015"]

PRESETS: Dict[str, ExperimentSpec] = {
    "published_cross": ExperimentSpec(
        name="published_cross", train_sets=[[d] for d in PUBLISHED_DATASETS]
    ),
    "published_combinations": ExperimentSpec(
        name="published_combinations",
        train_sets=[
            ["MSSEG-2016-train", "3D-MR-MS"],
            ["ISBI-2015", "MSSEG-2016-train"],
            ["ISBI-2015", "3D-MR-MS"],
            ["MSSEG-2016-train", "3D-MR-MS", "ISBI-2015"],
        ],
    ),
    "published_ablation": ExperimentSpec(
        name="published_ablation",
        train_sets=[[d] for d in PUBLISHED_DATASETS],
        normalizations=["quantile", "linear"],
        topologies=["nested_dense", "plain_skip"],
    ),
    "phantom_normalization": ExperimentSpec(
        name="phantom_normalization",
        train_sets=[["siteA"], ["siteB"], ["siteC"], ["siteD"]],
        normalizations=["quantile", "linear"],
        seeds=[0, 1, 2, 3, 4],
    ),
}


def preset(name: str) -> ExperimentSpec:
    if name not in PRESETS:
        raise ValidationError(
            f"Unknown preset {name!r}; choose from {', '.join(PRESETS)}"
        )
    return PRESETS[name].model_copy(deep=True)


def train_key(dataset_ids: Sequence[str]) -> str:
    return "+".join(dataset_ids)


@dataclass(frozen=True)
class MatrixJob:
    """One row of the matrix before it runs"""

    train_ids: Tuple[str, ...]
    test_id: str
    normalization: Normalization
    topology: TopologyKind
    seed: int
    label_source: str = "consensus"

    @property
    def train_key(self) -> str:
        return train_key(self.train_ids)

    @property
    def key(self) -> Tuple[str, str, str, str, int, str]:
        return (
            self.train_key,
            self.test_id,
            self.normalization,
            self.topology,
            self.seed,
            self.label_source,
        )


@dataclass
class JobOutcome:
    row: ResultRow
    scores: List[ScanScore]
    training: Optional[TrainingResult] = None


def plan_matrix(
    spec: ExperimentSpec, manifests: Mapping[str, DatasetManifest]
) -> List[MatrixJob]:
    """Expand a spec into jobs; test sets default to every dataset not trained on"""
    referenced = {d for group in spec.train_sets for d in group}
    referenced |= set(spec.test_sets or [])
    unknown = sorted(referenced - set(manifests))
    if unknown:
        raise ValidationError(f"Unknown dataset(s): {', '.join(unknown)}")

    jobs = []
    for group in spec.train_sets:
        if len(set(group)) != len(group):
            raise ValidationError(f"Training set {train_key(group)} repeats a dataset")
        if spec.test_sets is None:
            tests = [d for d in manifests if d not in group]
        else:
            overlap = sorted(set(group) & set(spec.test_sets))
            if overlap:
                raise ValidationError(
                    f"Training set {train_key(group)} overlaps test set(s) "
                    f"{', '.join(overlap)}"
                )
            tests = list(spec.test_sets)
        for test_id in tests:
            for normalization in spec.normalizations:
                for topology in spec.topologies:
                    for seed in spec.seeds:
                        jobs.append(
                            MatrixJob(
                                train_ids=tuple(group),
                                test_id=test_id,
                                normalization=normalization,
                                topology=topology,
                                seed=seed,
                                label_source=spec.label_source,
                            )
                        )
    return jobs


def check_disjoint(
    train_ids: Sequence[str], test_id: str, manifests: Mapping[str, DatasetManifest]
) -> None:
    """No scan of the test set may appear in the training data"""
    seen = {s for d in train_ids for s in manifests[d].scan_ids}
    leaked = sorted(seen & set(manifests[test_id].scan_ids))
    if leaked:
        raise ValidationError(
            f"Scan(s) {', '.join(leaked[:5])} appear in both "
            f"{train_key(train_ids)} and {test_id}"
        )


def per_center_breakdown(
    scores: Union[Sequence[ScanScore], Mapping[str, float]], manifest: DatasetManifest
) -> Dict[str, float]:
    """Unweighted mean Dice per center tag; untagged scans form one group"""
    if isinstance(scores, Mapping):
        dices = dict(scores)
    else:
        dices = {s.scan_id: s.dice for s in scores if not s.empty_truth}
    centers = {e.scan_id: e.center_tag or UNTAGGED for e in manifest.entries}
    grouped: Dict[str, List[float]] = defaultdict(list)
    for scan_id, value in dices.items():
        grouped[centers.get(scan_id, UNTAGGED)].append(value)
    return {center: float(np.mean(v)) for center, v in sorted(grouped.items())}


class ExperimentRunner:
    """Loads data, runs matrix rows and persists them"""

    def __init__(
        self,
        manifests: Mapping[str, DatasetManifest],
        settings: Optional[Config] = None,
        store: Optional[ResultStore] = None,
        scores_path: Optional[Union[str, Path]] = None,
    ) -> None:
        self.manifests = dict(manifests)
        self.settings = settings or config
        self.store = store
        self.scores_path = Path(scores_path) if scores_path else None
        self._scans: Dict[Tuple[str, str], List[Tuple[Volume, LabelVolume]]] = {}

    def scans(
        self, dataset_id: str, label_source: str = "consensus"
    ) -> List[Tuple[Volume, LabelVolume]]:
        key = (dataset_id, label_source)
        if key not in self._scans:
            manifest = self.manifests[dataset_id]
            self._scans[key] = [
                load_scan(manifest, e, label_source) for e in manifest.entries
            ]
            logger.info("Loaded %d scans of %s", len(self._scans[key]), dataset_id)
        return self._scans[key]

    def template_for(self, volumes: Sequence[Volume]) -> IntensityTemplate:
        template = build_template(volumes, self.settings.TEMPLATE_RESOLUTION)
        if self.settings.TEMPLATE_UNIT_RANGE:
            template = rescale_template(template)
        return template

    def slices(self, volume: Volume, labels: LabelVolume) -> List[SliceSample]:
        return extract_slices(
            volume, labels, self.settings.MIN_BRAIN_VOXELS, self.settings.SLICE_SIZE
        )

    def score_scans(
        self,
        model: SegNet,
        pairs: Sequence[Tuple[Volume, LabelVolume]],
        volumes: Sequence[Volume],
        cfg: TrainConfig,
    ) -> List[ScanScore]:
        """Per-scan scores of a model on normalized volumes"""
        scores = []
        for volume, (_, labels) in zip(volumes, pairs):
            samples = self.slices(volume, labels)
            predictions = predict(
                model, samples, cfg.prediction_threshold, cfg.batch_size
            )
            truths = [s.mask for s in samples]
            scores.append(scan_score(predictions, truths, volume.provenance.scan_id))
        return scores

    def train_config(self, base: TrainConfig, job: MatrixJob) -> TrainConfig:
        topology = base.topology.model_copy(update={"kind": job.topology})
        return base.model_copy(update={"seed": job.seed, "topology": topology})

    def run_job(self, job: MatrixJob, base: TrainConfig) -> JobOutcome:
        """Template, normalize, slice, train and score one row"""
        torch.set_num_threads(max(self.settings.TORCH_THREADS, 1))
        check_disjoint(job.train_ids, job.test_id, self.manifests)

        train_pairs = [
            p for d in job.train_ids for p in self.scans(d, job.label_source)
        ]
        test_pairs = self.scans(job.test_id)
        train_volumes = [v for v, _ in train_pairs]
        test_volumes = [v for v, _ in test_pairs]

        template: Optional[IntensityTemplate] = None
        if job.normalization == "quantile":
            template = self.template_for(train_volumes)
        train_volumes = normalize_volumes(train_volumes, job.normalization, template)
        test_volumes = normalize_volumes(test_volumes, job.normalization, template)

        train_samples = [
            s
            for volume, (_, labels) in zip(train_volumes, train_pairs)
            for s in self.slices(volume, labels)
        ]
        cfg = self.train_config(base, job)
        training = train(train_samples, cfg)
        scores = self.score_scans(training.model, test_pairs, test_volumes, cfg)

        dice_mean, iou_mean = dataset_score(scores)
        excluded = sum(s.empty_truth for s in scores)
        row = ResultRow(
            train_key=job.train_key,
            test_key=job.test_id,
            normalization=job.normalization,
            topology=job.topology,
            seed=job.seed,
            dice=dice_mean,
            iou=iou_mean,
            n_scans_evaluated=len(scores) - excluded,
            n_scans_excluded=excluded,
            label_source=job.label_source,
            per_center=per_center_breakdown(scores, self.manifests[job.test_id]),
        )
        logger.info(
            "%s -> %s [%s, %s, seed %d]: dice %.4f iou %.4f",
            row.train_key,
            row.test_key,
            row.normalization,
            row.topology,
            row.seed,
            row.dice,
            row.iou,
        )
        return JobOutcome(row=row, scores=scores, training=training)

    def _record(self, outcome: JobOutcome) -> None:
        if self.store is not None:
            self.store.append(outcome.row)
        if self.scores_path is not None:
            write_scores_csv(
                outcome.scores,
                self.scores_path,
                outcome.row.train_key,
                outcome.row.test_key,
            )

    def run_matrix(
        self, spec: ExperimentSpec, jobs: int = 1, progress: bool = False
    ) -> List[ResultRow]:
        """Run every missing row of the matrix and return all rows in plan order"""
        planned = plan_matrix(spec, self.manifests)
        for job in planned:
            check_disjoint(job.train_ids, job.test_id, self.manifests)

        done: Dict[Tuple, ResultRow] = {}
        if self.store is not None:
            done = {row.key: row for row in self.store.rows()}
        pending = [job for job in planned if job.key not in done]
        if len(pending) < len(planned):
            logger.info(
                "Resuming: %d of %d rows already stored",
                len(planned) - len(pending),
                len(planned),
            )

        bar = tqdm(total=len(pending), desc="matrix", disable=not progress)
        if jobs <= 1:
            for job in pending:
                outcome = self.run_job(job, spec.train_config)
                self._record(outcome)
                done[job.key] = outcome.row
                bar.update()
        else:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                futures = [
                    pool.submit(
                        _run_in_worker,
                        self.manifests,
                        self.settings,
                        job,
                        spec.train_config,
                    )
                    for job in pending
                ]
                for future in as_completed(futures):
                    outcome = future.result()
                    self._record(outcome)
                    done[outcome.row.key] = outcome.row
                    bar.update()
        bar.close()
        return [done[job.key] for job in planned]


def _run_in_worker(
    manifests: Mapping[str, DatasetManifest],
    settings: Config,
    job: MatrixJob,
    base: TrainConfig,
) -> JobOutcome:
    outcome = ExperimentRunner(manifests, settings).run_job(job, base)
    outcome.training = None  # The model stays in the worker
    return outcome


def run_matrix(
    spec: ExperimentSpec,
    manifests: Union[Mapping[str, DatasetManifest], Sequence[DatasetManifest]],
    jobs: int = 1,
    store: Optional[ResultStore] = None,
    settings: Optional[Config] = None,
    progress: bool = False,
) -> List[ResultRow]:
    """Run a train/test matrix over the given datasets"""
    if not isinstance(manifests, Mapping):
        manifests = {m.dataset_id: m for m in manifests}
    runner = ExperimentRunner(manifests, settings, store)
    return runner.run_matrix(spec, jobs=jobs, progress=progress)
