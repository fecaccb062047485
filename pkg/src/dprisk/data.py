"""Credit-scoring datasets: the public delinquency CSV and a synthetic stand-in."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import ContractError, SeedSpec

LABEL_COLUMN = "SeriousDlqin2yrs"
GMC_FEATURES = (
    "RevolvingUtilizationOfUnsecuredLines",
    "age",
    "NumberOfTime30-59DaysPastDueNotWorse",
    "DebtRatio",
    "MonthlyIncome",
    "NumberOfOpenCreditLinesAndLoans",
    "NumberOfTimes90DaysLate",
    "NumberRealEstateLoansOrLines",
    "NumberOfTime60-89DaysPastDueNotWorse",
    "NumberOfDependents",
)
_INDEX_COLUMNS = ("", "Unnamed: 0", "id", "Id", "index")
_MISSING = ("", "NA", "na", "NaN", "nan")


class DataParseError(ContractError):
    """A cell or header in a data file could not be interpreted."""


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    column_names: tuple[str, ...]
    normalization_stats: dict[str, tuple[float, float]] | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ContractError("features must be (n, d) with one label per row")
        if self.features.shape[1] != len(self.column_names):
            raise ContractError("one column name per feature is required")

    def __len__(self):
        return self.features.shape[0]

    @property
    def n_missing(self) -> int:
        return int(np.isnan(self.features).sum())


def load_gmc_csv(path) -> Dataset:
    """Read the credit-delinquency CSV. Blank or NA cells become NaN."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataParseError(f"{path}: file is empty") from None
        if LABEL_COLUMN not in header:
            raise DataParseError(f"{path}: missing label column {LABEL_COLUMN}")
        label_idx = header.index(LABEL_COLUMN)
        feat_idx = [i for i, h in enumerate(header) if i != label_idx and h not in _INDEX_COLUMNS]
        rows, labels = [], []
        for r, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataParseError(f"{path}: row {r} has {len(row)} cells, header has {len(header)}")
            try:
                y = float(row[label_idx])
            except ValueError:
                raise DataParseError(f"{path}: row {r}, column {LABEL_COLUMN}: {row[label_idx]!r} is not numeric") from None
            if y not in (0.0, 1.0):
                raise DataParseError(f"{path}: row {r}: label must be 0 or 1, got {row[label_idx]!r}")
            vals = []
            for i in feat_idx:
                cell = row[i].strip()
                if cell in _MISSING:
                    vals.append(math.nan)
                    continue
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise DataParseError(f"{path}: row {r}, column {header[i]}: {cell!r} is not numeric") from None
            rows.append(vals)
            labels.append(int(y))
    if not rows:
        raise DataParseError(f"{path}: no data rows")
    return Dataset(np.array(rows, dtype=np.float64), np.array(labels, dtype=np.int64), tuple(header[i] for i in feat_idx))


def impute_median(ds: Dataset) -> Dataset:
    x = ds.features.copy()
    for j, name in enumerate(ds.column_names):
        col = x[:, j]
        miss = np.isnan(col)
        if miss.all():
            raise ContractError(f"column {name} has no observed values to impute from")
        if miss.any():
            col[miss] = np.median(col[~miss])
    return replace(ds, features=x)


def _subsample_class(idx: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    if k >= idx.size:
        return idx
    return np.sort(rng.choice(idx, k, replace=False))


def preprocess(ds: Dataset, balance: bool = True, target_n: int | None = None, seed: SeedSpec = SeedSpec()) -> Dataset:
    """Median-impute, optionally balance and subsample, then z-score every column.

    Subsampling keeps rows in their original order, so running this twice on
    its own output changes nothing beyond floating-point rounding.
    """
    ds = impute_median(ds)
    rng = seed.substream("preprocess").rng()
    pos = np.flatnonzero(ds.labels == 1)
    neg = np.flatnonzero(ds.labels == 0)
    if balance:
        if pos.size == 0 or neg.size == 0:
            raise ContractError("cannot balance a dataset with a single class")
        k = min(pos.size, neg.size)
        pos, neg = _subsample_class(pos, k, rng), _subsample_class(neg, k, rng)
    keep = np.sort(np.concatenate([pos, neg]))
    if target_n is not None and target_n < keep.size:
        if target_n < 2:
            raise ContractError("target_n must be at least 2")
        if balance:
            half = target_n // 2
            keep = np.sort(np.concatenate([_subsample_class(pos, half, rng), _subsample_class(neg, half, rng)]))
        else:
            keep = np.sort(rng.choice(keep, target_n, replace=False))
    x = ds.features[keep]
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    for j, name in enumerate(ds.column_names):
        if not std[j] > 0:
            raise ContractError(f"column {name} has zero variance and cannot be normalized")
    z = (x - mean) / std
    stats = {name: (float(mean[j]), float(std[j])) for j, name in enumerate(ds.column_names)}
    return Dataset(z, ds.labels[keep].copy(), ds.column_names, stats)


def synth_credit(n: int, feature_dim: int, separation: float, seed: SeedSpec = SeedSpec()) -> Dataset:
    """Two Gaussian classes whose means are ``separation`` apart along (1, ..., 1)/sqrt(d).

    Labels are balanced (counts differ by at most one) and the columns are
    z-scored, matching the preprocessing applied to the real data.
    """
    if n < 2 or feature_dim < 1:
        raise ContractError("synth_credit needs n >= 2 and feature_dim >= 1")
    if separation < 0:
        raise ContractError("separation must be non-negative")
    rng = seed.substream("synth_credit").rng()
    labels = np.zeros(n, dtype=np.int64)
    labels[: n // 2] = 1
    labels = rng.permutation(labels)
    u = np.ones(feature_dim) / math.sqrt(feature_dim)
    x = rng.standard_normal((n, feature_dim)) + np.outer(labels - 0.5, separation * u)
    mean, std = x.mean(axis=0), x.std(axis=0)
    names = tuple(f"x{j}" for j in range(feature_dim))
    stats = {name: (float(mean[j]), float(std[j])) for j, name in enumerate(names)}
    return Dataset((x - mean) / std, labels, names, stats)
