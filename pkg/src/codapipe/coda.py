"""Aitchison geometry on the simplex.

Every transform works row-wise on the last axis, so a single composition
(shape ``(D,)``) and a table of compositions (shape ``(n, D)``) go through
the same code path. Parts must be strictly positive; zeros and missing
cells are rejected rather than repaired.

The isometric coordinates are pivot (balance) coordinates::

    z_j = sqrt((D - j) / (D - j + 1)) * ln(x_j / gmean(x_{j+1}, ..., x_D))

for ``j = 1 .. D-1``. The corresponding contrast matrix is returned by
:func:`pivot_basis`; ``ilr(x) == clr(x) @ basis.T`` and
``clr(x) == ilr(x) @ basis``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import BasisMismatch, InsufficientRows, LabelMismatch, NonPositivePart


def _as_positive(x, allow_nan=False) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0 or arr.shape[-1] < 2:
        raise ValueError("a composition needs at least two parts")
    bad = ~(arr > 0)
    if allow_nan:
        bad &= ~np.isnan(arr)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise NonPositivePart(idx[0] if len(idx) == 1 else idx, arr[idx])
    return arr


def closure(x) -> np.ndarray:
    """Rescale each composition so its parts sum to one.

    Parameters
    ----------
    x : array_like, shape (D,) or (n, D)
        Strictly positive parts.

    Returns
    -------
    ndarray
        Same shape as ``x`` with unit row sums.

    Raises
    ------
    NonPositivePart
        If any entry is zero, negative or NaN. The offending index is
        attached to the exception.
    """
    arr = _as_positive(x)
    return arr / arr.sum(axis=-1, keepdims=True)


def clr(x) -> np.ndarray:
    """Centered log-ratio coefficients, ``ln(x_i / gmean(x))``."""
    logs = np.log(_as_positive(x))
    return logs - logs.mean(axis=-1, keepdims=True)


def clr_inverse(y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    e = np.exp(y - y.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def alr(x, denominator: int = -1) -> np.ndarray:
    """Additive log-ratio coordinates against one reference part."""
    logs = np.log(_as_positive(x))
    D = logs.shape[-1]
    ref = denominator % D
    keep = [j for j in range(D) if j != ref]
    return logs[..., keep] - logs[..., [ref]]


def alr_inverse(y, denominator: int = -1) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    D = y.shape[-1] + 1
    ref = denominator % D
    full = np.insert(y, ref, 0.0, axis=-1)
    return clr_inverse(full)


def pivot_basis(D: int) -> np.ndarray:
    """Orthonormal pivot contrast matrix of shape ``(D-1, D)``.

    Row ``j`` contrasts part ``j`` against the geometric mean of the parts
    after it. Rows sum to zero and are orthonormal.
    """
    if D < 2:
        raise ValueError("D must be at least 2")
    basis = np.zeros((D - 1, D))
    for j in range(D - 1):
        rest = D - j - 1
        scale = np.sqrt(rest / (rest + 1.0))
        basis[j, j] = scale
        basis[j, j + 1:] = -scale / rest
    return basis


def _check_basis(basis, D=None) -> np.ndarray:
    basis = np.asarray(basis, dtype=float)
    if basis.ndim != 2 or basis.shape[1] != basis.shape[0] + 1:
        raise BasisMismatch(f"basis must have shape (D-1, D), got {basis.shape}")
    if D is not None and basis.shape[1] != D:
        raise BasisMismatch(f"basis is for D={basis.shape[1]}, data has D={D}")
    return basis


def ilr(x, basis=None) -> np.ndarray:
    """Isometric log-ratio coordinates (pivot basis unless one is given)."""
    c = clr(x)
    D = c.shape[-1]
    basis = pivot_basis(D) if basis is None else _check_basis(basis, D)
    return c @ basis.T


def ilr_inverse(z, basis=None) -> np.ndarray:
    """Map ilr coordinates back to closed compositions.

    Raises
    ------
    BasisMismatch
        If ``basis`` does not have ``z.shape[-1] + 1`` columns.
    """
    z = np.asarray(z, dtype=float)
    D = z.shape[-1] + 1
    basis = pivot_basis(D) if basis is None else _check_basis(basis, D)
    return clr_inverse(z @ basis)


def aitchison_distance(a, b) -> float:
    """Aitchison distance between two compositions.

    Labeled inputs (``pandas.Series``) must carry identical labels in the
    same order; bare arrays must have the same length.
    """
    if isinstance(a, pd.Series) and isinstance(b, pd.Series):
        if list(a.index) != list(b.index):
            raise LabelMismatch("compositions have different component labels")
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise LabelMismatch(f"part counts differ: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(clr(a) - clr(b)))


def aitchison_distances(x) -> np.ndarray:
    """Pairwise Aitchison distance matrix between the rows of ``x``."""
    c = clr(x)
    sq = np.sum(c * c, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * c @ c.T
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(d2)


def euclidean_distances(z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    diff = z[:, None, :] - z[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


@dataclass(frozen=True)
class CompositionTable:
    """Labeled ``n x D`` table of compositions.

    ``values`` may hold NaN for missing cells when ``allow_missing`` is set;
    every observed cell must be strictly positive.
    """

    values: np.ndarray
    row_ids: tuple
    labels: tuple
    allow_missing: bool = False

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 2:
            raise ValueError("values must be two-dimensional")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "row_ids", tuple(self.row_ids))
        object.__setattr__(self, "labels", tuple(self.labels))
        n, D = values.shape
        if len(self.labels) != D or len(set(self.labels)) != D:
            raise LabelMismatch("labels must be unique with one per column")
        if len(self.row_ids) != n or len(set(self.row_ids)) != n:
            raise LabelMismatch("row ids must be unique with one per row")
        if D < 2:
            raise ValueError("a composition needs at least two parts")
        _as_positive(values, allow_nan=self.allow_missing)
        values.setflags(write=False)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, allow_missing=False) -> "CompositionTable":
        return cls(frame.to_numpy(dtype=float), tuple(frame.index), tuple(frame.columns),
                   allow_missing=allow_missing)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.values, index=list(self.row_ids), columns=list(self.labels))

    @property
    def shape(self):
        return self.values.shape

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.values)

    def select(self, columns: Sequence[str]) -> "CompositionTable":
        idx = [self.labels.index(c) for c in columns]
        return CompositionTable(self.values[:, idx], self.row_ids, tuple(columns),
                                allow_missing=self.allow_missing)

    def closed(self) -> "CompositionTable":
        return CompositionTable(closure(self.values), self.row_ids, self.labels)


@dataclass(frozen=True)
class CoordinateMatrix:
    values: np.ndarray
    kind: str
    labels: tuple
    basis: np.ndarray | None = None
    row_ids: tuple = ()

    def __post_init__(self):
        if self.kind not in ("clr", "ilr", "alr"):
            raise ValueError(f"unknown coordinate kind {self.kind!r}")
        expected = len(self.labels) if self.kind == "clr" else len(self.labels) - 1
        if np.shape(self.values)[1] != expected:
            raise BasisMismatch(f"{self.kind} needs {expected} columns")


def ilr_coordinates(table: CompositionTable, basis=None) -> CoordinateMatrix:
    D = len(table.labels)
    basis = pivot_basis(D) if basis is None else _check_basis(basis, D)
    return CoordinateMatrix(ilr(table.values, basis), "ilr", table.labels, basis, table.row_ids)


def clr_coordinates(table: CompositionTable) -> CoordinateMatrix:
    return CoordinateMatrix(clr(table.values), "clr", table.labels, None, table.row_ids)


@dataclass(frozen=True)
class VariationMatrix:
    t: np.ndarray
    method: str
    labels: tuple = field(default=())

    def to_frame(self) -> pd.DataFrame:
        labels = list(self.labels) or None
        return pd.DataFrame(self.t, index=labels, columns=labels)


def _table_values(table) -> tuple[np.ndarray, tuple]:
    if isinstance(table, CompositionTable):
        return table.values, table.labels
    values = _as_positive(table)
    return values, tuple(f"x{j + 1}" for j in range(values.shape[1]))


def pairwise_log_ratios(values) -> np.ndarray:
    """Array of shape ``(n, D, D)`` with entry ``[i, j, k] = ln(x_ij / x_ik)``."""
    logs = np.log(_as_positive(values))
    return logs[:, :, None] - logs[:, None, :]


def variation_matrix_classical(table) -> VariationMatrix:
    """Sample variances (``ddof=1``) of all pairwise log-ratios."""
    values, labels = _table_values(table)
    if values.shape[0] < 2:
        raise InsufficientRows("the variation matrix needs at least two rows")
    t = np.var(pairwise_log_ratios(values), axis=0, ddof=1)
    t = 0.5 * (t + t.T)
    np.fill_diagonal(t, 0.0)
    return VariationMatrix(t, "classical", labels)


def center(table) -> np.ndarray:
    """Closed geometric mean of each component."""
    values, _ = _table_values(table)
    if values.shape[0] < 1:
        raise InsufficientRows("center needs at least one row")
    return closure(np.exp(np.log(values).mean(axis=0)))
