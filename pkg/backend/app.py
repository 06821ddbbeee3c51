from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

from config import Config, config
from errors import DataError, HarnessError, NumericalError, ValidationError
from fastapi import Depends, FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from manifest import ingest, load_manifest
from metrics import ConfusionCounts, dice, iou
from models import ResultRow, TestResult
from pydantic import BaseModel, Field
from result_store import ResultStore
from stats import one_way_anova, rm_anova, tukey_hsd, wilcoxon_signed_rank

# Initialize FastAPI app
app = FastAPI(title="Lesion Segmentation Generalizability Harness", root_path="")

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


def get_settings() -> Config:
    return config


def get_store(settings: Config = Depends(get_settings)) -> ResultStore:
    return ResultStore(settings.results_path / "results.csv")


# Pydantic models for request/response
class DatasetSummary(BaseModel):
    """Response model for one dataset manifest"""

    dataset_id: str
    scans: int
    patients: int
    slices: int
    heterogeneous: bool
    centers: Dict[str, int]


class StatsRequest(BaseModel):
    """Input of a statistical test; which field is used depends on the test"""

    groups: Optional[Dict[str, List[float]]] = None  # anova, tukey
    pairs: Optional[List[Tuple[float, float]]] = None  # wilcoxon: [a, b] per pair
    mode: Literal["exact", "normal_approx"] = "normal_approx"
    table: Optional[List[List[float]]] = None  # rm_anova: conditions x subjects


class ScoreRequest(BaseModel):
    """Pixel confusion counts of one prediction"""

    tp: int = Field(0, ge=0)
    fp: int = Field(0, ge=0)
    fn: int = Field(0, ge=0)
    tn: int = Field(0, ge=0)


class ScoreResponse(BaseModel):
    dice: float
    iou: float


HTTP_STATUS = {ValidationError: 422, DataError: 404, NumericalError: 500}


def _http_error(e: HarnessError) -> HTTPException:
    return HTTPException(status_code=HTTP_STATUS.get(type(e), 500), detail=str(e))


# API Endpoints


@app.get("/")
async def health(settings: Config = Depends(get_settings)) -> Dict[str, str]:
    """Liveness check"""
    return {"status": "ok", "results_dir": str(settings.results_path)}


@app.get("/api/results", response_model=List[ResultRow])
async def get_results(
    normalization: Optional[str] = None,
    topology: Optional[str] = None,
    store: ResultStore = Depends(get_store),
) -> List[ResultRow]:
    """Persisted result rows, optionally filtered"""
    try:
        return store.find(normalization=normalization, topology=topology)
    except HarnessError as e:
        raise _http_error(e)


@app.get("/api/datasets", response_model=List[DatasetSummary])
async def get_datasets(
    load: bool = False, settings: Config = Depends(get_settings)
) -> List[DatasetSummary]:
    """Manifests found as <DATA_DIR>/*/manifest.json"""
    try:
        summaries = []
        for path in sorted(Path(settings.DATA_DIR).glob("*/manifest.json")):
            report = ingest(
                load_manifest(path), settings.MIN_BRAIN_VOXELS, load_data=load
            )
            summaries.append(
                DatasetSummary(
                    dataset_id=report.dataset_id,
                    scans=report.scans,
                    patients=report.patients,
                    slices=report.slices,
                    heterogeneous=report.heterogeneous,
                    centers=report.centers,
                )
            )
        return summaries
    except HarnessError as e:
        raise _http_error(e)


@app.post("/api/stats/{test}", response_model=List[TestResult])
async def run_stats(test: str, request: StatsRequest) -> List[TestResult]:
    """Run anova, tukey, wilcoxon or rm_anova on posted values"""
    try:
        if test in ("anova", "tukey"):
            if not request.groups:
                raise ValidationError(f"{test} needs 'groups'")
            if test == "anova":
                return [one_way_anova(request.groups)]
            return tukey_hsd(request.groups)
        if test == "wilcoxon":
            if not request.pairs:
                raise ValidationError("wilcoxon needs 'pairs'")
            return [wilcoxon_signed_rank(request.pairs, request.mode)]
        if test == "rm_anova":
            if not request.table:
                raise ValidationError("rm_anova needs 'table'")
            return [rm_anova(request.table)]
        raise DataError(f"Unknown test {test!r}")
    except HarnessError as e:
        raise _http_error(e)


@app.post("/api/metrics/score", response_model=ScoreResponse)
async def score(request: ScoreRequest) -> ScoreResponse:
    """Dice and IoU from confusion counts"""
    counts = ConfusionCounts(tp=request.tp, fp=request.fp, fn=request.fn, tn=request.tn)
    return ScoreResponse(dice=dice(counts), iou=iou(counts))
