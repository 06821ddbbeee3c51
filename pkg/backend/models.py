import math
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator

Normalization = Literal["quantile", "linear"]
TopologyKind = Literal["plain_skip", "nested_dense"]


class Topology(BaseModel):
    """Skip-connection layout and width of the encoder-decoder"""

    kind: TopologyKind = "nested_dense"
    depth: int = Field(3, ge=2)  # Number of resolution levels L
    base_channels: int = Field(8, ge=1)  # Channels at level 0
    channel_multiplier: int = Field(2, ge=1)  # Width growth per level

    def channels(self, level: int) -> int:
        return self.base_channels * self.channel_multiplier**level

    @property
    def min_side_divisor(self) -> int:
        return 2 ** (self.depth - 1)


class TrainConfig(BaseModel):
    """Training hyperparameters; defaults are the published protocol"""

    lr: float = Field(1e-3, gt=0)
    weight_decay: float = Field(1e-6, ge=0)
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = Field(1e-8, gt=0)
    bce_pos_weight: float = Field(0.8, gt=0, lt=1)
    epochs: int = Field(50, ge=1)
    batch_size: int = Field(8, ge=1)
    split_ratio: float = Field(0.8, gt=0, lt=1)
    seed: int = 0
    topology: Topology = Topology()
    prediction_threshold: float = 0.5

    @field_validator("betas")
    @classmethod
    def _betas_in_range(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        if not all(0.0 <= beta < 1.0 for beta in value):
            raise ValueError("betas must lie in [0, 1)")
        return value


class IntensityTemplate(BaseModel):
    """Monotone quantile curve defining the target intensity distribution"""

    quantiles: List[float]  # Q, sampled at ranks k/(M-1)
    source_ids: List[str] = []  # Scans averaged into the template

    @field_validator("quantiles")
    @classmethod
    def _monotone_curve(cls, value: List[float]) -> List[float]:
        if len(value) < 2:
            raise ValueError("template needs at least 2 quantiles")
        if not all(math.isfinite(q) for q in value):
            raise ValueError("template quantiles must be finite")
        if value[0] < 0:
            raise ValueError("template quantiles must be nonnegative")
        if any(b < a for a, b in zip(value, value[1:])):
            raise ValueError("template quantiles must be nondecreasing")
        return value

    @property
    def M(self) -> int:
        return len(self.quantiles)


class ManifestEntry(BaseModel):
    """One scan of a dataset with its image and annotation files"""

    patient_id: str
    scan_id: str
    center_tag: Optional[str] = None  # Acquisition center, e.g. "center03"
    image_path: str
    mask_paths: Dict[str, str] = {}  # rater_id -> mask file
    consensus_path: Optional[str] = None  # Ground truth when available

    @model_validator(mode="after")
    def _has_mask(self) -> "ManifestEntry":
        if not self.mask_paths and not self.consensus_path:
            raise ValueError(f"scan {self.scan_id} has no mask")
        return self

    def all_paths(self) -> List[str]:
        paths = [self.image_path, *self.mask_paths.values()]
        if self.consensus_path:
            paths.append(self.consensus_path)
        return paths


class DatasetManifest(BaseModel):
    """A dataset: list of scans plus its multi-center flag"""

    dataset_id: str
    entries: List[ManifestEntry]
    heterogeneous: bool = False  # Acquired at several centers
    root: Optional[str] = None  # Directory relative paths resolve against

    @model_validator(mode="after")
    def _unique_entries(self) -> "DatasetManifest":
        keys = [(e.patient_id, e.scan_id) for e in self.entries]
        if len(set(keys)) != len(keys):
            raise ValueError(f"duplicate (patient_id, scan_id) in {self.dataset_id}")
        paths = [p for e in self.entries for p in e.all_paths()]
        if len(set(paths)) != len(paths):
            raise ValueError(f"file paths repeat in {self.dataset_id}")
        return self

    @property
    def scan_ids(self) -> List[str]:
        return [e.scan_id for e in self.entries]


class PhantomProfile(BaseModel):
    """Acquisition site simulated by the phantom generator"""

    site_id: str
    gamma: float = Field(1.0, gt=0)  # Warp exponent
    gain: float = Field(1.0, gt=0)  # Warp multiplier
    offset: float = Field(0.0, ge=0)  # Warp additive term inside the brain
    noise_sigma: float = Field(0.0, ge=0)
    lesion_count_range: Tuple[int, int] = (3, 6)
    lesion_radius_range_mm: Tuple[float, float] = (2.0, 5.0)
    dims: Tuple[int, int, int] = (64, 64, 24)
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    center_tag: Optional[str] = None
    rater_count: int = Field(0, ge=0)  # Simulated raters besides the ground truth
    seed: int = 0  # Structural seed: anatomy and lesions

    @model_validator(mode="after")
    def _sane_ranges(self) -> "PhantomProfile":
        low, high = self.lesion_count_range
        if low < 0 or high < low:
            raise ValueError("lesion_count_range must satisfy 0 <= low <= high")
        rlow, rhigh = self.lesion_radius_range_mm
        if rlow <= 0 or rhigh < rlow:
            raise ValueError("lesion_radius_range_mm must satisfy 0 < low <= high")
        if any(s <= 0 for s in self.spacing):
            raise ValueError("spacing must be positive")
        return self


class ExperimentSpec(BaseModel):
    """Declarative train/test matrix"""

    name: str = "cross_dataset"
    train_sets: List[List[str]]  # Singletons and unions of dataset ids
    test_sets: Optional[List[str]] = None  # None: every dataset not trained on
    normalizations: List[Normalization] = ["quantile"]
    topologies: List[TopologyKind] = ["nested_dense"]
    label_source: str = "consensus"  # consensus | union | majority:<k> | rater:<id>
    train_config: TrainConfig = TrainConfig()
    seeds: List[int] = [0]

    @field_validator("train_sets")
    @classmethod
    def _nonempty_train_sets(cls, value: List[List[str]]) -> List[List[str]]:
        if not value or any(not group for group in value):
            raise ValueError("train_sets must be non-empty lists of dataset ids")
        return value

    @field_validator("label_source")
    @classmethod
    def _known_label_source(cls, value: str) -> str:
        if value in ("consensus", "union"):
            return value
        if value.startswith("rater:") and len(value) > len("rater:"):
            return value
        if value.startswith("majority:") and value.split(":", 1)[1].isdigit():
            return value
        raise ValueError(f"unknown label_source {value!r}")


class ResultRow(BaseModel):
    """One (train set, test set, normalization, topology, seed) outcome"""

    train_key: str  # Dataset ids joined with "+"
    test_key: str
    normalization: Normalization
    topology: TopologyKind
    seed: int
    dice: float = Field(ge=0, le=1)
    iou: float = Field(ge=0, le=1)
    n_scans_evaluated: int = 0
    n_scans_excluded: int = 0
    label_source: str = "consensus"
    per_center: Dict[str, float] = {}

    @property
    def key(self) -> Tuple[str, str, str, str, int, str]:
        return (
            self.train_key,
            self.test_key,
            self.normalization,
            self.topology,
            self.seed,
            self.label_source,
        )


class TestResult(BaseModel):
    """Outcome of one statistical test"""

    __test__ = False  # Not a pytest collection target

    statistic: float = Field(allow_inf_nan=False)
    df: Tuple[float, ...] = ()
    p_value: float = Field(ge=0, le=1)
    method: str  # Includes tie and zero conventions
    label: Optional[str] = None  # E.g. the compared pair for post-hoc tests
    flags: List[str] = []
