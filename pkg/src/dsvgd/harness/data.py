"""Dataset ingestion, normalization, synthetic generators and agent partitions."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from ..models import Dataset

PIXEL_SCALE = 0.99 / 255.0
PIXEL_OFFSET = 0.01


class DataFormatError(ValueError):
    """Malformed dataset file; the message carries the 1-based line number."""


@dataclass
class SplitDataset:
    train: Dataset
    test: Dataset


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def read_csv(path, label_column="0", max_rows: Optional[int] = None):
    """Parse a numeric CSV into ``(features, labels)``.

    A first row with any non-numeric cell is taken as a header.
    ``label_column`` is a header name or a 0-based column index.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    rows, header = [], None
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        for line_no, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            cells = [c.strip() for c in row]
            if header is None and not rows and not all(_is_number(c) for c in cells):
                header = cells
                continue
            try:
                values = [float(c) for c in cells]
            except ValueError:
                raise DataFormatError(f"{path}:{line_no}: non-numeric value in row {row!r}") from None
            width = len(header) if header is not None else (len(rows[0]) if rows else len(values))
            if len(values) != width:
                raise DataFormatError(f"{path}:{line_no}: expected {width} columns, got {len(values)}")
            if not all(np.isfinite(values)):
                raise DataFormatError(f"{path}:{line_no}: non-finite value")
            rows.append(values)
            if max_rows is not None and len(rows) >= max_rows:
                break
    if not rows:
        raise ValueError(f"{path}: no data rows")
    table = np.asarray(rows, dtype=np.float64)
    col = _label_index(label_column, header, table.shape[1])
    return np.delete(table, col, axis=1), table[:, col]


def _label_index(label_column, header, width: int) -> int:
    label_column = str(label_column)
    if header is not None and label_column in header:
        return header.index(label_column)
    try:
        idx = int(label_column)
    except ValueError:
        raise ValueError(f"label column {label_column!r} not found in header {header}") from None
    if not -width <= idx < width:
        raise ValueError(f"label column index {idx} out of range for {width} columns")
    return idx % width


def infer_task(labels: np.ndarray) -> str:
    values = np.unique(labels)
    if values.size == 2 and set(values.tolist()) <= {-1.0, 1.0, 0.0}:
        return "binary"
    if np.all(values == np.round(values)) and values.min() >= 0 and values.size <= 100:
        return "multiclass"
    return "regression"


def encode_labels(labels: np.ndarray, task: str) -> tuple[np.ndarray, Optional[int]]:
    """Map raw labels to the model convention: ``{-1, +1}`` or ``0..C-1``."""
    if task == "binary":
        values = np.unique(labels)
        if values.size > 2:
            raise ValueError(f"binary task needs two label values, found {values.size}")
        # smaller value -> -1, larger -> +1
        return np.where(labels == values.max(), 1.0, -1.0) if values.size == 2 else np.sign(labels), None
    if task == "multiclass":
        if np.any(labels != np.round(labels)) or labels.min() < 0:
            raise ValueError("multiclass labels must be non-negative integers")
        return labels.astype(np.int64), int(labels.max()) + 1
    return labels.astype(np.float64), None


def train_test_split(x, y, test_fraction: float, seed):
    rng = np.random.default_rng(seed)
    perm = rng.permutation(x.shape[0])
    n_test = int(round(test_fraction * x.shape[0]))
    if x.shape[0] - n_test < 1:
        raise ValueError("test split leaves no training rows")
    test, train = perm[:n_test], perm[n_test:]
    return (x[train], y[train]), (x[test], y[test])


def normalize(train_x, train_y, test_x, test_y, mode: str, task: str):
    """Apply a normalization fitted on the training split.

    Returns ``(train_x, train_y, test_x, test_y, y_mean, y_std)``; target
    statistics are only fitted for regression.
    """
    y_mean, y_std = 0.0, 1.0
    if mode == "none":
        pass
    elif mode == "pixel":
        train_x = train_x * PIXEL_SCALE + PIXEL_OFFSET
        test_x = test_x * PIXEL_SCALE + PIXEL_OFFSET
    elif mode == "standardize":
        mu = train_x.mean(axis=0)
        sd = train_x.std(axis=0)
        sd = np.where(sd > 0, sd, 1.0)
        train_x = (train_x - mu) / sd
        test_x = (test_x - mu) / sd
        if task == "regression":
            y_mean = float(train_y.mean())
            y_std = float(train_y.std()) or 1.0
            train_y = (train_y - y_mean) / y_std
            test_y = (test_y - y_mean) / y_std
    else:
        raise ValueError(f"unknown normalization {mode!r}")
    return train_x, train_y, test_x, test_y, y_mean, y_std


def build_split(x, y, task="auto", normalization="none", test_fraction=0.2, seed=0) -> SplitDataset:
    if task == "auto":
        task = infer_task(y)
    y, num_classes = encode_labels(np.asarray(y), task)
    (tx, ty), (vx, vy) = train_test_split(np.asarray(x, dtype=np.float64), y, test_fraction, seed)
    tx, ty, vx, vy, y_mean, y_std = normalize(tx, ty, vx, vy, normalization, task)
    num_classes = num_classes or 2
    train = Dataset(tx, ty, task, num_classes, y_mean, y_std)
    # an empty test split falls back to the training rows
    test = Dataset(vx, vy, task, num_classes, y_mean, y_std) if vx.shape[0] else train
    return SplitDataset(train, test)


def load_dataset(
    path,
    label_column="0",
    task: str = "auto",
    normalization: str = "none",
    test_fraction: float = 0.2,
    seed=0,
    max_rows: Optional[int] = None,
) -> SplitDataset:
    x, y = read_csv(path, label_column, max_rows)
    return build_split(x, y, task, normalization, test_fraction, seed)


def separable2d(num_rows: int, seed=0, margin: float = 0.5):
    """Two linearly separable 2-D classes with labels in ``{-1, +1}``.

    Points are uniform in ``[-3, 3]^2`` and labelled by the sign of
    ``x1 + x2``; points within ``margin`` of the separating line are
    pushed out so the classes have a gap.
    """
    rng = np.random.default_rng(seed)
    x = rng.uniform(-3.0, 3.0, size=(num_rows, 2))
    s = x.sum(axis=1)
    y = np.where(s >= 0, 1.0, -1.0)
    x = x + (y * margin / np.sqrt(2.0))[:, None]
    return x, y


def regression1d(num_rows: int, seed=0, noise: float = 0.1):
    """``y = sin(2 x) + 0.5 x + noise`` on ``x ~ U[-2, 2]``."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-2.0, 2.0, size=(num_rows, 1))
    y = np.sin(2.0 * x[:, 0]) + 0.5 * x[:, 0] + noise * rng.standard_normal(num_rows)
    return x, y


SYNTHETIC = {"separable2d": separable2d, "regression1d": regression1d}


def as_two_class(data: Dataset) -> Dataset:
    """Relabel a ``{-1, +1}`` binary dataset as classes ``{0, 1}``."""
    if data.task != "binary":
        return data
    return Dataset(data.x, (data.y > 0).astype(np.int64), "multiclass", 2, data.y_mean, data.y_std)


def partition_dataset(data: Dataset, num_agents: int, seed) -> list[Dataset]:
    """Random permutation, then contiguous splits; the first ``M mod K`` agents get one extra row."""
    m = len(data)
    if num_agents < 1:
        raise ValueError("need at least one agent")
    if num_agents > m:
        raise ValueError(f"cannot split {m} rows among {num_agents} agents")
    perm = np.random.default_rng(seed).permutation(m)
    base, extra = divmod(m, num_agents)
    sizes = [base + (1 if k < extra else 0) for k in range(num_agents)]
    bounds = np.cumsum([0] + sizes)
    return [data.subset(perm[bounds[k] : bounds[k + 1]]) for k in range(num_agents)]
