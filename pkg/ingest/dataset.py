"""CSV dataset ingestion and batch assignment."""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
import pandas as pd

from dcqr.errors import DatasetError
from dcqr.local_quantile import ObservationBatch

logger = logging.getLogger(__name__)

BATCHING_MODES = ("contiguous", "round_robin")
MAX_REPORTED_LINES = 10


@dataclass(frozen=True)
class DatasetFile:
    """Location and schema of an (x, y[, batch_id]) CSV file."""

    path: Path
    delimiter: str = ","
    header: bool = True
    x_column: str = "x"
    y_column: str = "y"
    batch_column: str = "batch_id"

    def __post_init__(self):
        object.__setattr__(self, "path", Path(self.path))

    def line_number(self, row: int) -> int:
        """1-based file line of a 0-based data row."""
        return row + (2 if self.header else 1)


def _as_dataset(dataset: Union[DatasetFile, str, Path]) -> DatasetFile:
    return dataset if isinstance(dataset, DatasetFile) else DatasetFile(Path(dataset))


def _format_lines(lines: List[int]) -> str:
    shown = ", ".join(str(n) for n in lines[:MAX_REPORTED_LINES])
    more = len(lines) - MAX_REPORTED_LINES
    return shown + (f" (+{more} more)" if more > 0 else "")


def load_dataset(dataset: Union[DatasetFile, str, Path]) -> pd.DataFrame:
    """Read and validate a dataset into columns x, y and optional batch_id.

    Raises:
        DatasetError: Unreadable file, missing column, non-finite values
    """
    spec = _as_dataset(dataset)
    try:
        if spec.header:
            raw = pd.read_csv(spec.path, sep=spec.delimiter, float_precision="round_trip")
        else:
            raw = pd.read_csv(spec.path, sep=spec.delimiter, header=None, float_precision="round_trip")
            names = [spec.x_column, spec.y_column, spec.batch_column][: raw.shape[1]]
            if raw.shape[1] > 3:
                raise DatasetError(f"{spec.path}: expected 2 or 3 columns without a header, got {raw.shape[1]}")
            raw.columns = names
    except FileNotFoundError as err:
        raise DatasetError(f"{spec.path}: file not found") from err
    except pd.errors.EmptyDataError as err:
        raise DatasetError(f"{spec.path}: file is empty") from err
    except pd.errors.ParserError as err:
        raise DatasetError(f"{spec.path}: {err}") from err

    raw.columns = [str(c).strip() for c in raw.columns]
    for column in (spec.x_column, spec.y_column):
        if column not in raw.columns:
            raise DatasetError(f"{spec.path}: line 1: missing column '{column}'")
    if raw.empty:
        raise DatasetError(f"{spec.path}: no data rows")

    frame = pd.DataFrame({
        "x": pd.to_numeric(raw[spec.x_column], errors="coerce"),
        "y": pd.to_numeric(raw[spec.y_column], errors="coerce"),
    })
    bad = ~(np.isfinite(frame["x"].to_numpy(dtype=float)) & np.isfinite(frame["y"].to_numpy(dtype=float)))
    if np.any(bad):
        lines = [spec.line_number(int(r)) for r in np.flatnonzero(bad)]
        raise DatasetError(f"{spec.path}: non-finite x or y on line(s) {_format_lines(lines)}")

    if spec.batch_column in raw.columns:
        batch_ids = pd.to_numeric(raw[spec.batch_column], errors="coerce").to_numpy(dtype=float)
        invalid = ~np.isfinite(batch_ids) | (batch_ids != np.round(batch_ids))
        if np.any(invalid):
            lines = [spec.line_number(int(r)) for r in np.flatnonzero(invalid)]
            raise DatasetError(f"{spec.path}: batch_id must be an integer on line(s) {_format_lines(lines)}")
        frame["batch_id"] = batch_ids.astype(int)

    logger.info("Loaded %d rows from %s", len(frame), spec.path)
    return frame


def to_batches(frame: pd.DataFrame, m: Optional[int] = None, batching: str = "contiguous") -> List[ObservationBatch]:
    """Split a dataset into batches.

    A batch_id column wins; otherwise rows are split into m batches,
    either in contiguous blocks or round-robin.
    """
    xs = frame["x"].to_numpy(dtype=float)
    ys = frame["y"].to_numpy(dtype=float)

    if "batch_id" in frame.columns:
        ids = frame["batch_id"].to_numpy()
        return [ObservationBatch(xs[ids == b], ys[ids == b], batch_id=i)
                for i, b in enumerate(np.unique(ids))]

    if batching not in BATCHING_MODES:
        raise DatasetError(f"batching must be one of {BATCHING_MODES}, got '{batching}'")
    if m is None or m < 1:
        raise DatasetError("m must be a positive integer when the dataset has no batch_id column")
    if m > len(frame):
        raise DatasetError(f"cannot split {len(frame)} rows into {m} batches")
    if batching == "contiguous":
        groups = np.array_split(np.arange(len(frame)), m)
    else:
        groups = [np.arange(i, len(frame), m) for i in range(m)]
    return [ObservationBatch(xs[idx], ys[idx], batch_id=i) for i, idx in enumerate(groups)]


def load_batches(
    dataset: Union[DatasetFile, str, Path], m: Optional[int] = None, batching: str = "contiguous"
) -> List[ObservationBatch]:
    return to_batches(load_dataset(dataset), m, batching)
