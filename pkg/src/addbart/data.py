"""Datasets, covariate splits, cutpoint grids and cross-validation folds."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

CONTINUOUS = "continuous"
BINARY = "binary"
RESPONSE_KINDS = (CONTINUOUS, BINARY)


class DataError(ValueError):
    """Raised when input data violates a loader or dataset contract."""


@dataclass(frozen=True, eq=False)
class Dataset:
    """Response vector plus an ``n x p`` numeric covariate matrix."""

    y: np.ndarray
    x: np.ndarray
    column_names: tuple[str, ...]
    response_kind: str = CONTINUOUS
    response_name: str = "y"

    def __post_init__(self):
        y = np.ascontiguousarray(self.y, dtype=float)
        x = np.ascontiguousarray(self.x, dtype=float)
        if x.ndim != 2:
            raise DataError("covariate matrix must be two-dimensional")
        if y.ndim != 1 or y.shape[0] != x.shape[0]:
            raise DataError("response length does not match covariate rows")
        if len(self.column_names) != x.shape[1]:
            raise DataError("column_names length does not match covariate columns")
        if self.response_kind not in RESPONSE_KINDS:
            raise DataError(f"unknown response kind {self.response_kind!r}")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
            raise DataError("missing or non-finite values are not allowed")
        if self.response_kind == BINARY and not np.all((y == 0) | (y == 1)):
            raise DataError("binary response must contain only 0 and 1")
        y.setflags(write=False)
        x.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "column_names", tuple(self.column_names))

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    def column_index(self, name: str) -> int:
        try:
            return self.column_names.index(name)
        except ValueError:
            raise DataError(f"unknown covariate column {name!r}") from None

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(self.y[rows], self.x[rows], self.column_names,
                       self.response_kind, self.response_name)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.column_names == other.column_names
                and self.response_kind == other.response_kind
                and self.response_name == other.response_name
                and np.array_equal(self.y, other.y)
                and np.array_equal(self.x, other.x))


@dataclass(frozen=True)
class CovariateSplit:
    """Disjoint column index sets for the minus and plus covariate blocks."""

    minus_indices: tuple[int, ...]
    plus_indices: tuple[int, ...]

    def __post_init__(self):
        minus = tuple(int(i) for i in self.minus_indices)
        plus = tuple(int(i) for i in self.plus_indices)
        if not minus or not plus:
            raise DataError("both covariate sets must be nonempty")
        if set(minus) & set(plus):
            raise DataError(f"covariate sets overlap on columns {sorted(set(minus) & set(plus))}")
        if len(set(minus)) != len(minus) or len(set(plus)) != len(plus):
            raise DataError("duplicate column in covariate set")
        object.__setattr__(self, "minus_indices", minus)
        object.__setattr__(self, "plus_indices", plus)

    def validate(self, p: int) -> None:
        bad = [i for i in self.minus_indices + self.plus_indices if not 0 <= i < p]
        if bad:
            raise DataError(f"column indices {bad} out of range for p={p}")

    @classmethod
    def from_names(cls, data: Dataset, minus: Sequence[str], plus: Sequence[str]) -> "CovariateSplit":
        return cls(tuple(data.column_index(c) for c in minus),
                   tuple(data.column_index(c) for c in plus))


@dataclass(frozen=True, eq=False)
class CutpointGrid:
    """Per-column strictly increasing candidate split values.

    An observation goes left at a split ``(j, c)`` when ``x[j] < c``.
    """

    cuts: tuple[np.ndarray, ...]

    @property
    def p(self) -> int:
        return len(self.cuts)

    @property
    def counts(self) -> np.ndarray:
        return np.array([len(c) for c in self.cuts], dtype=np.int64)

    def bin(self, x: np.ndarray) -> np.ndarray:
        """Map covariates to cut-index bins.

        ``bins[i, j]`` counts the cutpoints of column ``j`` that are ``<= x[i, j]``,
        so ``x[i, j] < cuts[j][c]`` iff ``bins[i, j] <= c``.
        """
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.p:
            raise DataError(f"expected rows with {self.p} covariates")
        out = np.empty(x.shape, dtype=np.int64)
        for j, c in enumerate(self.cuts):
            out[:, j] = np.searchsorted(c, x[:, j], side="right")
        return out

    def subset(self, columns: Sequence[int]) -> "CutpointGrid":
        return CutpointGrid(tuple(self.cuts[j] for j in columns))

    def index_of(self, column: int, value: float) -> int:
        c = self.cuts[column]
        k = int(np.searchsorted(c, value))
        if k == len(c) or c[k] != value:
            raise DataError(f"split value {value} is not a cutpoint of column {column}")
        return k


def build_cutpoints(data: Dataset | np.ndarray, max_cuts: int = 100) -> CutpointGrid:
    """Quantile cutpoints per column.

    Candidates are the midpoints between consecutive distinct observed
    values; when there are more than ``max_cuts`` of them, ``max_cuts`` are
    taken at equally spaced ranks.
    """
    if max_cuts < 1:
        raise ValueError("max_cuts must be >= 1")
    x = data.x if isinstance(data, Dataset) else np.asarray(data, dtype=float)
    cuts = []
    for j in range(x.shape[1]):
        u = np.unique(x[:, j])
        mids = 0.5 * (u[:-1] + u[1:])
        if len(mids) > max_cuts:
            pick = np.round(np.linspace(0, len(mids) - 1, max_cuts)).astype(np.int64)
            mids = mids[pick]
        mids = np.ascontiguousarray(mids)
        mids.setflags(write=False)
        cuts.append(mids)
    return CutpointGrid(tuple(cuts))


@dataclass(frozen=True, eq=False)
class FoldAssignment:
    k: int
    assignment: np.ndarray = field(repr=False)  # labels in 1..k

    def test_rows(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == fold)

    def train_rows(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment != fold)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.k + 1)[1:]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["row_index", "fold"])
            for i, f in enumerate(self.assignment):
                w.writerow([i, int(f)])


def make_folds(n: int, k: int, seed: int) -> FoldAssignment:
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > n:
        raise ValueError(f"cannot split {n} observations into {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    labels = np.empty(n, dtype=np.int64)
    labels[perm] = np.arange(n) % k + 1
    return FoldAssignment(k, labels)


def load_csv(path, response_column: str, kind: str = CONTINUOUS,
             categorical: Sequence[str] = ()) -> Dataset:
    """Read a headered, comma-separated file into a :class:`Dataset`.

    Columns named in ``categorical`` are expanded into one indicator column
    per level (``name=level``), levels in sorted order.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"data file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file, header row required")
    header = [h.strip() for h in rows[0]]
    body = [r for r in rows[1:] if r]
    if response_column not in header:
        raise DataError(f"response column {response_column!r} not found in {path}")
    missing = [c for c in categorical if c not in header]
    if missing:
        raise DataError(f"categorical columns {missing} not found in {path}")
    for lineno, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(r)}")

    def numeric(col):
        j = header.index(col)
        out = np.empty(len(body))
        for i, r in enumerate(body):
            cell = r[j].strip()
            try:
                out[i] = float(cell)
            except ValueError:
                raise DataError(f"{path}:{i + 2}: non-numeric value {cell!r} "
                                f"in column {col!r}") from None
            if not np.isfinite(out[i]):
                raise DataError(f"{path}:{i + 2}: missing value in column {col!r}")
        return out

    y = numeric(response_column)
    if kind == BINARY and not np.all((y == 0) | (y == 1)):
        raise DataError(f"binary response {response_column!r} has values outside {{0, 1}}")
    cols, names = [], []
    for col in header:
        if col == response_column:
            continue
        if col in categorical:
            j = header.index(col)
            values = [r[j].strip() for r in body]
            if any(v == "" for v in values):
                raise DataError(f"{path}: missing value in column {col!r}")
            for level in sorted(set(values)):
                cols.append(np.array([v == level for v in values], dtype=float))
                names.append(f"{col}={level}")
        else:
            cols.append(numeric(col))
            names.append(col)
    x = np.column_stack(cols) if cols else np.empty((len(body), 0))
    return Dataset(y, x, tuple(names), kind, response_column)


def write_csv(data: Dataset, path) -> None:
    """Write ``data`` with the response first; floats use ``repr`` so reloading is exact."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([data.response_name, *data.column_names])
        for yi, xi in zip(data.y, data.x):
            w.writerow([repr(float(yi)), *(repr(float(v)) for v in xi)])
