"""CSV ingestion.

Data files have a header row.  The response column is ``y``; for regression
models every other column is a covariate, in header order.  Multivariate
normal data use every column.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, InsufficientData


@dataclass
class Dataset:
    y: np.ndarray
    X: np.ndarray | None = None
    covariate_names: list = field(default_factory=list)
    standardization: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.y.shape[0]


def read_table(path):
    """Header and float matrix of a CSV file."""
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    except OSError as e:
        raise DataError(f"cannot read {path}: {e.strerror or e}") from None
    if not rows:
        raise InsufficientData(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        raise DataError(f"{path}: duplicate column names")
    body = rows[1:]
    if not body:
        raise InsufficientData(f"{path} has a header but no data rows")
    try:
        data = np.array([[float(c) for c in r] for r in body], dtype=float)
    except ValueError as e:
        raise DataError(f"{path}: non-numeric entry ({e})") from None
    if data.ndim != 2 or data.shape[1] != len(header):
        raise DataError(f"{path}: rows do not match the header width")
    if not np.all(np.isfinite(data)):
        raise DataError(f"{path}: missing or non-finite values")
    return header, data


def _is_binary(col):
    return bool(np.all((col == 0) | (col == 1)))


def _standardize(col):
    m, s = float(col.mean()), float(col.std(ddof=1)) if col.size > 1 else 0.0
    if s == 0:
        return col - m, (m, 1.0)
    return (col - m) / s, (m, s)


def load_iid(path, multivariate=False) -> Dataset:
    header, data = read_table(path)
    if multivariate:
        return Dataset(data, covariate_names=header)
    if "y" in header:
        return Dataset(data[:, header.index("y")])
    if len(header) == 1:
        return Dataset(data[:, 0])
    raise DataError(f"{path}: no response column named 'y'")


def load_regression(path, intercept=True, standardize=False,
                    standardize_response=True) -> Dataset:
    """Response and design columns, optionally standardized.

    Standardization maps every non-binary covariate (and, unless disabled,
    the response) to sample mean 0 and sd 1; the constants are returned so
    results can be mapped back.
    """
    header, data = read_table(path)
    if "y" not in header:
        raise DataError(f"{path}: no response column named 'y'")
    j = header.index("y")
    y = data[:, j].copy()
    names = [h for k, h in enumerate(header) if k != j]
    X = np.delete(data, j, axis=1)
    consts = {}
    if standardize:
        for k, name in enumerate(names):
            if not _is_binary(X[:, k]):
                X[:, k], consts[name] = _standardize(X[:, k])
        if standardize_response and not _is_binary(y):
            y, consts["y"] = _standardize(y)
    if intercept:
        X = np.column_stack([np.ones(len(y)), X])
        names = ["intercept"] + names
    if X.shape[1] == 0:
        raise DataError(f"{path}: no covariates and no intercept")
    return Dataset(y, X, names, {k: {"mean": v[0], "sd": v[1]} for k, v in consts.items()})


def write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(v if isinstance(v, str) else "%.17g" % v for v in row) + "\n")
