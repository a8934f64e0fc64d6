"""Tabular data handling: CSV ingestion, MCAR corruption, scaling, baselines, metrics.

Masks follow the convention ``1 = missing``. Missing cells of a
:class:`MaskedMatrix` hold NaN and are only reachable through the masked
accessors.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.impute import KNNImputer

logger = logging.getLogger(__name__)

MISSING_TOKENS = ("", "NA", "NaN", "nan", "?")


class DataError(ValueError):
    """Malformed or unusable input data."""


@dataclass
class MaskedMatrix:
    values: np.ndarray
    mask: np.ndarray
    columns: list = field(default_factory=list)

    def __post_init__(self):
        self.values = np.array(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask).astype(np.uint8)
        if self.values.shape != self.mask.shape or self.values.ndim != 2:
            raise DataError(f"values {self.values.shape} and mask {self.mask.shape} differ")
        self.values[self.mask.astype(bool)] = np.nan
        if not self.columns:
            self.columns = [f"x{j}" for j in range(self.values.shape[1])]

    @property
    def shape(self):
        return self.values.shape

    @property
    def missing(self):
        return self.mask.astype(bool)

    def filled(self, fill=0.0):
        """Values with every missing cell replaced by ``fill``."""
        return np.where(self.missing, fill, self.values)

    def observed_column(self, j):
        return self.values[~self.missing[:, j], j]

    def missing_rate(self):
        return float(self.mask.mean())


def load_csv(path, missing_tokens=MISSING_TOKENS, drop_columns=()):
    """Read a header-first numeric CSV into a :class:`MaskedMatrix`."""
    tokens = set(missing_tokens)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    body = [r for r in rows[1:] if r]
    keep = [j for j, h in enumerate(header) if h not in set(drop_columns)]
    n, p = len(body), len(keep)
    values = np.zeros((n, p))
    mask = np.zeros((n, p), dtype=np.uint8)
    for i, row in enumerate(body):
        if len(row) != len(header):
            raise DataError(f"{path}: row {i + 2} has {len(row)} cells, expected {len(header)}")
        for jj, j in enumerate(keep):
            cell = row[j].strip()
            if cell in tokens:
                mask[i, jj] = 1
                continue
            try:
                values[i, jj] = float(cell)
            except ValueError:
                raise DataError(f"{path}: non-numeric cell {cell!r} at row {i + 2}, column {header[j]!r}") from None
    if n and np.any(mask.all(axis=0)):
        bad = [header[keep[j]] for j in np.flatnonzero(mask.all(axis=0))]
        raise DataError(f"{path}: columns with no observed value: {bad}")
    logger.info("loaded %s: %d rows, %d columns", path, n, p)
    return MaskedMatrix(values, mask, [header[j] for j in keep])


def load_mask_csv(path):
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    try:
        mask = np.array([[int(c) for c in r] for r in rows[1:]], dtype=np.uint8)
    except ValueError:
        raise DataError(f"{path}: mask entries must be 0 or 1") from None
    if mask.size and not np.isin(mask, (0, 1)).all():
        raise DataError(f"{path}: mask entries must be 0 or 1")
    return mask


def write_csv(path, array, columns, mask=None, fmt="{:.17g}"):
    array = np.asarray(array)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for i, row in enumerate(array):
            if mask is None:
                w.writerow([fmt.format(v) for v in row])
            else:
                w.writerow(["" if mask[i, j] else fmt.format(v) for j, v in enumerate(row)])


def write_mask_csv(path, mask, columns):
    write_csv(path, np.asarray(mask, dtype=int), columns, fmt="{:d}")


def corrupt_mcar(data, rate, rng):
    """Hide each entry independently with probability ``rate``.

    Rows left without an observed entry are redrawn. Returns
    ``(corrupted, truth)`` where ``truth`` is the untouched value matrix.
    """
    if not 0.0 <= rate < 1.0:
        raise DataError(f"rate must lie in [0, 1), got {rate}")
    if data.mask.any():
        raise DataError("corrupt_mcar expects complete data")
    rng = np.random.default_rng(rng)
    n, p = data.shape
    mask = rng.random((n, p)) < rate
    bad = mask.all(axis=1)
    while bad.any():
        mask[bad] = rng.random((int(bad.sum()), p)) < rate
        bad = mask.all(axis=1)
    truth = data.values.copy()
    return MaskedMatrix(truth, mask, list(data.columns)), truth


class Standardizer:
    """Per-column centring and scaling from observed entries (population std)."""

    def fit(self, X, mask=None):
        X = np.asarray(X, dtype=np.float64)
        miss = np.isnan(X) if mask is None else np.asarray(mask).astype(bool)
        obs = np.where(miss, np.nan, X)
        self.mean_ = np.nanmean(obs, axis=0)
        self.scale_ = np.nanstd(obs, axis=0)
        if np.any(~(self.scale_ > 0)):
            raise DataError(f"constant or empty columns: {np.flatnonzero(~(self.scale_ > 0)).tolist()}")
        return self

    def transform(self, X):
        return (np.asarray(X, dtype=np.float64) - self.mean_) / self.scale_

    def inverse_transform(self, X):
        return np.asarray(X, dtype=np.float64) * self.scale_ + self.mean_

    def to_dict(self):
        return {"mean": self.mean_.tolist(), "scale": self.scale_.tolist()}

    @classmethod
    def from_dict(cls, d):
        s = cls()
        s.mean_ = np.asarray(d["mean"], dtype=np.float64)
        s.scale_ = np.asarray(d["scale"], dtype=np.float64)
        return s


def standardize(data):
    """Returns ``(standardized MaskedMatrix, fitted Standardizer)``."""
    s = Standardizer().fit(data.values, data.mask)
    return MaskedMatrix(s.transform(data.values), data.mask, list(data.columns)), s


def impute_mean(data):
    """Replace each missing entry by its column's observed mean."""
    means = np.array([data.observed_column(j).mean() for j in range(data.shape[1])])
    return np.where(data.missing, means[None, :], data.values)


def _knn_fill(values_nan, k):
    # donors are restricted to rows observing the target coordinate;
    # coordinates no donor observes fall back to the column mean
    obs = ~np.isnan(values_nan)
    overlap = (obs.astype(np.int64) @ obs.T.astype(np.int64)) > 0
    np.fill_diagonal(overlap, False)
    rows, cols = np.nonzero(~obs)
    orphan = int(np.sum(~np.any(overlap[rows] & obs[:, cols].T, axis=1))) if len(rows) else 0
    if orphan:
        logger.warning("kNN: %d missing entries have no donor; using column means", orphan)
    return KNNImputer(n_neighbors=k, keep_empty_features=True).fit_transform(values_nan)


def select_knn_k(data, k_range=range(5, 16), folds=5, rng=None):
    """Pick ``k`` by hiding folds of observed entries and scoring their imputation.

    Returns ``(best_k, {k: mean squared error})``.
    """
    k_range = list(k_range)
    if len(k_range) == 1:
        return k_range[0], {}
    rng = np.random.default_rng(rng)
    obs = np.argwhere(~data.missing)
    fold_of = rng.permutation(len(obs)) % folds
    errors = {k: [] for k in k_range}
    for f in range(folds):
        hide = obs[fold_of == f]
        vals = data.values.copy()
        vals[hide[:, 0], hide[:, 1]] = np.nan
        truth = data.values[hide[:, 0], hide[:, 1]]
        for k in k_range:
            filled = _knn_fill(vals, k)
            errors[k].append(np.mean((filled[hide[:, 0], hide[:, 1]] - truth) ** 2))
    scores = {k: float(np.mean(v)) for k, v in errors.items()}
    return min(scores, key=scores.get), scores


def impute_knn(data, k_range=range(5, 16), folds=5, rng=None):
    """k-nearest-neighbour imputation with ``k`` chosen by cross validation.

    Distances use the coordinates observed in both rows (Euclidean, rescaled
    by overlap size); each missing entry is the mean of the ``k`` nearest
    rows that observe it.
    """
    k, _ = select_knn_k(data, k_range, folds, rng)
    filled = _knn_fill(data.values, k)
    return np.where(data.missing, filled, data.values)


def imputation_mse(imputed, truth, mask):
    """Mean squared error over the missing entries only."""
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        raise DataError("no missing entries to score")
    diff = np.asarray(imputed, dtype=np.float64)[mask] - np.asarray(truth, dtype=np.float64)[mask]
    return float(np.mean(diff ** 2))
