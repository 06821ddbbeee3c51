import io
import json
import logging
import os
import threading
from pathlib import Path
from typing import Iterable, List, Optional, Set, Tuple, Union

import pandas as pd
from errors import DataError
from models import ResultRow

logger = logging.getLogger(__name__)

RESULT_COLUMNS = [
    "train_key",
    "test_key",
    "normalization",
    "topology",
    "seed",
    "dice",
    "iou",
    "n_scans_evaluated",
    "n_scans_excluded",
    "label_source",
    "per_center",
]

RowKey = Tuple[str, str, str, str, int, str]


def rows_frame(rows: Iterable[ResultRow]) -> pd.DataFrame:
    """Flatten rows for CSV output; per_center is stored as JSON text"""
    records = []
    for row in rows:
        record = row.model_dump()
        record["per_center"] = json.dumps(record["per_center"], sort_keys=True)
        records.append(record)
    return pd.DataFrame.from_records(records, columns=RESULT_COLUMNS)


def frame_rows(frame: pd.DataFrame) -> List[ResultRow]:
    rows = []
    for record in frame.to_dict(orient="records"):
        if "label_source" not in record or pd.isna(record["label_source"]):
            record["label_source"] = "consensus"
        per_center = record.get("per_center")
        record["per_center"] = (
            json.loads(per_center) if isinstance(per_center, str) and per_center else {}
        )
        rows.append(ResultRow(**record))
    return rows


class ResultStore:
    """Append-only CSV of ResultRows with resume support"""

    def __init__(self, path: Union[str, Path]) -> None:
        self.path = Path(path)
        self._lock = threading.Lock()

    def _complete_text(self) -> str:
        """File contents without a trailing partial line left by an interrupted write"""
        if not self.path.exists():
            return ""
        text = self.path.read_text(encoding="utf-8")
        if text and not text.endswith("\n"):
            logger.warning("Dropping partial trailing line in %s", self.path)
            text = text[: text.rfind("\n") + 1]
        return text

    def rows(self) -> List[ResultRow]:
        """All persisted rows, in write order"""
        text = self._complete_text()
        if not text.strip():
            return []
        try:
            frame = pd.read_csv(
                io.StringIO(text),
                float_precision="round_trip",
                dtype={"per_center": str, "label_source": str},
                keep_default_na=False,
            )
            return frame_rows(frame)
        except (pd.errors.ParserError, ValueError) as e:
            # Schema and JSON errors are ValueErrors too
            raise DataError(f"Results file {self.path} is corrupt: {e}") from e

    def keys(self) -> Set[RowKey]:
        return {row.key for row in self.rows()}

    def has(self, key: RowKey) -> bool:
        return key in self.keys()

    def append(self, row: ResultRow) -> None:
        """Persist one row with a single flushed write"""
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            text = self._complete_text()
            size = len(text.encode("utf-8"))
            if self.path.exists() and self.path.stat().st_size != size:
                self.path.write_text(text, encoding="utf-8")
            header = not text.strip()
            line = rows_frame([row]).to_csv(
                header=header, index=False, lineterminator="\n"
            )
            with open(self.path, "a", encoding="utf-8") as handle:
                handle.write(line)
                handle.flush()
                os.fsync(handle.fileno())

    def find(
        self,
        normalization: Optional[str] = None,
        topology: Optional[str] = None,
        train_key: Optional[str] = None,
        test_key: Optional[str] = None,
    ) -> List[ResultRow]:
        """Rows matching every given field"""
        wanted = {
            "normalization": normalization,
            "topology": topology,
            "train_key": train_key,
            "test_key": test_key,
        }
        return [
            row
            for row in self.rows()
            if all(v is None or getattr(row, k) == v for k, v in wanted.items())
        ]

    def clear(self) -> None:
        with self._lock:
            if self.path.exists():
                self.path.unlink()
