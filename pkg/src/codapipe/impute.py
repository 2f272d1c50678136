"""Missing-value imputation for compositional tables.

Two stages, in this order:

1. :func:`impute_by_trend` fills a cell from an ordinary least-squares line
   through that entity's earlier yearly values of the same component.
2. :func:`impute_iterative` fills whatever is left. Each repetition starts
   from a KNN guess and then, column by column, regresses the pivot
   coordinate isolating that column on the remaining pivot coordinates with
   LTS, until the imputed cells stop moving. Repetitions differ only in the
   LTS random starts and are averaged geometrically, which is the
   arithmetic mean in log-ratio coordinates.

Observed cells are never touched.
"""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .coda import CompositionTable, pivot_basis
from .errors import CodaError, DegenerateDesign, DimensionError, NonConvergent, ParseError
from .robust import lts_regression

log = logging.getLogger(__name__)

OBSERVED = "observed"
TREND = "trend_regression"
ITERATIVE = "iterative_knn_lts"


@dataclass(frozen=True)
class MissingMask:
    cells: np.ndarray

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=bool)
        object.__setattr__(self, "cells", cells)
        if cells.all(axis=1).any():
            raise CodaError(f"rows entirely missing: {np.flatnonzero(cells.all(axis=1)).tolist()}")
        if cells.all(axis=0).any():
            raise CodaError(f"columns entirely missing: {np.flatnonzero(cells.all(axis=0)).tolist()}")

    @classmethod
    def from_values(cls, values) -> "MissingMask":
        return cls(np.isnan(np.asarray(values, dtype=float)))

    @property
    def row_counts(self) -> np.ndarray:
        return self.cells.sum(axis=1)

    @property
    def column_counts(self) -> np.ndarray:
        return self.cells.sum(axis=0)

    @property
    def total(self) -> int:
        return int(self.cells.sum())


@dataclass
class HistoricalSeries:
    """Earlier yearly observations keyed by ``(entity_id, component)``."""

    series: dict = field(default_factory=dict)

    def __post_init__(self):
        clean = {}
        for key, points in self.series.items():
            points = sorted((int(y), float(v)) for y, v in points)
            years = [y for y, _ in points]
            if len(set(years)) != len(years):
                raise ParseError(f"duplicate years in history for {key}")
            if any(not v > 0 for _, v in points):
                raise ParseError(f"non-positive historical value for {key}")
            clean[tuple(key)] = points
        self.series = clean

    def get(self, entity, component):
        return self.series.get((entity, component), [])

    def __len__(self):
        return len(self.series)

    @classmethod
    def from_csv(cls, path) -> "HistoricalSeries":
        frame = pd.read_csv(path, dtype={"entity_id": str, "component": str})
        missing = {"entity_id", "component", "year", "value"} - set(frame.columns)
        if missing:
            raise ParseError(f"history file lacks columns {sorted(missing)}")
        groups = defaultdict(list)
        for i, row in enumerate(frame.itertuples(index=False)):
            try:
                groups[(row.entity_id, row.component)].append((int(row.year), float(row.value)))
            except (TypeError, ValueError) as exc:
                raise ParseError(f"bad history row {i + 2}: {exc}", row=i + 2) from exc
        return cls(dict(groups))


def impute_by_trend(series, target_year: int, min_points: int = 3):
    """Linear-trend prediction of a value at ``target_year``.

    ``series`` is a sequence of ``(year, value)`` pairs. Returns ``None``
    (unfillable) with fewer than ``min_points`` observations or when the
    prediction is not strictly positive.
    """
    points = sorted((float(y), float(v)) for y, v in series)
    if len(points) < min_points:
        return None
    years = np.array([p[0] for p in points])
    values = np.array([p[1] for p in points])
    dx = years - years.mean()
    sxx = dx @ dx
    if sxx == 0:
        return None
    slope = dx @ (values - values.mean()) / sxx
    pred = values.mean() + slope * (target_year - years.mean())
    if pred <= 1e-12 * np.abs(values).mean():
        return None
    return float(pred)


@dataclass
class ImputationReport:
    methods: np.ndarray
    row_ids: tuple
    labels: tuple
    repetitions: int = 0
    values: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)
    iterations: list = field(default_factory=list)
    fallbacks: int = 0
    nonconverged: list = field(default_factory=list)
    settings: dict = field(default_factory=dict)

    def cells(self, method=None):
        out = []
        for i, j in zip(*np.nonzero(self.methods != OBSERVED)):
            tag = str(self.methods[i, j])
            if method is not None and tag != method:
                continue
            out.append({
                "entity_id": str(self.row_ids[i]),
                "component": str(self.labels[j]),
                "method": tag,
                "value": self.values.get((i, j)),
                "std": self.std.get((i, j)),
            })
        return out

    def to_dict(self) -> dict:
        counts = {m: int((self.methods == m).sum()) for m in (OBSERVED, TREND, ITERATIVE)}
        return {
            "counts": counts,
            "repetitions": self.repetitions,
            "iterations_per_repetition": list(self.iterations),
            "regression_fallbacks": self.fallbacks,
            "nonconverged": [
                {"repetition": e["repetition"],
                 "cells": [[str(self.row_ids[i]), str(self.labels[j])] for i, j in e["cells"]]}
                for e in self.nonconverged
            ],
            "settings": dict(self.settings),
            "cells": self.cells(),
        }


def _knn_initialize(x, miss, k):
    """Fill missing cells from the median log-ratio of the k nearest rows."""
    n, D = x.shape
    out = x.copy()
    logs = np.log(np.where(miss, 1.0, x))
    complete = np.flatnonzero(~miss.any(axis=1))
    for i in np.flatnonzero(miss.any(axis=1)):
        obs_i = ~miss[i]
        ref = int(np.flatnonzero(obs_i)[0])
        for j in np.flatnonzero(miss[i]):
            pool = complete if len(complete) else np.flatnonzero(~miss[:, j] & ~miss[:, ref])
            pool = pool[pool != i]
            if not len(pool):
                raise CodaError(f"no donor rows for cell ({i}, {j})")
            dists = []
            for c in pool:
                common = obs_i & ~miss[c]
                if common.sum() < 2:
                    dists.append(np.inf)
                    continue
                a = logs[i, common] - logs[i, common].mean()
                b = logs[c, common] - logs[c, common].mean()
                dists.append(float(np.sqrt(np.sum((a - b) ** 2))))
            order = np.argsort(np.asarray(dists), kind="stable")[:min(k, len(pool))]
            donors = pool[order]
            ratio = np.median(logs[donors, j] - logs[donors, ref])
            out[i, j] = math.exp(logs[i, ref] + ratio)
    return out


class _Sweep:
    """One pass of column-wise LTS re-prediction, as a map on log imputed cells.

    The first pass searches each column's regression from random starts;
    later passes concentrate from the previous retained rows, so the map
    stays fixed once the retained sets settle.
    """

    def __init__(self, x, miss, rep_seed, trim_fraction, lts_starts):
        self.x = np.array(x, dtype=float)
        self.miss = miss
        self.trim_fraction = trim_fraction
        self.lts_starts = lts_starts
        D = x.shape[1]
        self.basis = pivot_basis(D)
        self.lead = self.basis[0, 0]
        counts = miss.sum(axis=0)
        self.columns = [int(j) for j in np.argsort(counts, kind="stable") if counts[j]]
        self.seeds = {j: int(np.random.SeedSequence([rep_seed, j]).generate_state(1)[0])
                      for j in self.columns}
        self.subsets = {}
        self.calls = 0
        self.fallbacks = 0

    def _fit(self, j, target, rest):
        try:
            fit = lts_regression(rest, target, trim_fraction=self.trim_fraction,
                                 seed=self.seeds[j], n_starts=self.lts_starts,
                                 init_subset=self.subsets.get(j))
        except (DegenerateDesign, DimensionError):
            self.fallbacks += 1
            A = np.column_stack([np.ones(len(target)), rest])
            coef = np.linalg.lstsq(A, target, rcond=None)[0]
            return lambda Z: coef[0] + np.atleast_2d(Z) @ coef[1:]
        self.subsets[j] = fit.trimmed_indices
        return fit.predict

    def __call__(self, log_cells):
        self.calls += 1
        cur = self.x.copy()
        cur[self.miss] = np.exp(log_cells)
        D = cur.shape[1]
        for j in self.columns:
            perm = [j] + [c for c in range(D) if c != j]
            logs = np.log(cur[:, perm])
            z = (logs - logs.mean(axis=1, keepdims=True)) @ self.basis.T
            obs = ~self.miss[:, j]
            predict = self._fit(j, z[obs, 0], z[obs, 1:])
            rows = np.flatnonzero(self.miss[:, j])
            # invert the leading pivot coordinate against the rest of the row
            with np.errstate(over="ignore"):
                cur[rows, j] = np.exp(logs[rows, 1:].mean(axis=1) + predict(z[rows, 1:]) / self.lead)
            if not np.all(np.isfinite(cur[rows, j]) & (cur[rows, j] > 0)):
                raise _Diverged(self.calls)
        return np.log(cur[self.miss])


class _Diverged(Exception):
    pass


def _one_repetition(x, miss, rep_seed, k, trim_fraction, tol, max_iter, lts_starts, strict):
    """Iterate the sweep map from the KNN start.

    On convergence the last sweep is returned. Otherwise the sweep with the
    smallest residual is kept, and the cells still moving there are
    reported; a sweep that overflows ends the repetition early.
    """
    sweep = _Sweep(x, miss, rep_seed, trim_fraction, lts_starts)
    cells = np.log(_knn_initialize(x, miss, k)[miss])
    best = (math.inf, cells, np.ones(len(cells), dtype=bool))
    for it in range(1, max_iter + 1):
        try:
            new = sweep(cells)
        except _Diverged:
            break
        with np.errstate(over="ignore"):
            step = np.abs(np.expm1(new - cells))
        moving = step >= tol
        if step.max() < best[0]:
            best = (float(step.max()), new, moving)
        cells = new
        if not moving.any():
            break
    _, cells, moving = best
    stuck = [tuple(int(v) for v in c) for c in np.argwhere(miss)[moving]]
    if stuck and strict:
        raise NonConvergent(f"imputation did not converge in {max_iter} iterations", cells=stuck)
    out = np.array(x, dtype=float)
    out[miss] = np.exp(cells)
    return out, it, sweep.fallbacks, stuck


def impute_iterative(table, mask=None, repetitions=1, seed=0, *, k=5, trim_fraction=0.25,
                     tol=1e-6, max_iter=50, lts_starts=500, strict=True, methods=None):
    """Impute missing cells by KNN initialisation and LTS refinement.

    Parameters
    ----------
    table : CompositionTable or ndarray
        Table with NaN in the missing cells.
    mask : MissingMask, optional
        Defaults to the NaN pattern of ``table``.
    repetitions : int
        Independent repetitions (seeds ``seed + r``) averaged in log-ratio
        space.
    strict : bool
        Raise :class:`NonConvergent` when a repetition is still moving after
        ``max_iter`` sweeps or overflows. Otherwise the sweep closest to a
        fixed point is kept and its moving cells are listed in
        ``report.nonconverged``.
    methods : ndarray of str, optional
        Per-cell tags carried over from an earlier stage (trend imputation).

    Returns
    -------
    (CompositionTable, ImputationReport)
    """
    if isinstance(table, CompositionTable):
        values, row_ids, labels = table.values, table.row_ids, table.labels
    else:
        values = np.asarray(table, dtype=float)
        row_ids = tuple(range(values.shape[0]))
        labels = tuple(f"x{j + 1}" for j in range(values.shape[1]))
    mask = MissingMask.from_values(values) if mask is None else mask
    miss = mask.cells
    if repetitions < 1:
        raise ValueError("repetitions must be at least 1")
    tags = np.full(values.shape, OBSERVED, dtype=object) if methods is None else methods.copy()
    tags[miss] = ITERATIVE
    report = ImputationReport(tags, tuple(row_ids), tuple(labels), repetitions=0, settings={
        "k": k, "trim_fraction": trim_fraction, "tol": tol, "max_iter": max_iter,
        "lts_starts": lts_starts, "seed": seed, "strict": strict,
    })
    out = np.array(values, dtype=float)
    if not miss.any():
        return CompositionTable(out, row_ids, labels), report

    draws = []
    for r in range(repetitions):
        filled, iters, fallbacks, stuck = _one_repetition(
            values, miss, seed + r, min(k, len(values) - 1), trim_fraction, tol, max_iter,
            lts_starts, strict)
        if stuck:
            report.nonconverged.append({"repetition": r, "cells": stuck})
        draws.append(filled[miss])
        report.iterations.append(iters)
        report.fallbacks += fallbacks
    draws = np.array(draws)
    out[miss] = np.exp(np.log(draws).mean(axis=0))
    spread = draws.std(axis=0, ddof=1) if repetitions > 1 else np.zeros(draws.shape[1])
    for (i, j), v, s in zip(np.argwhere(miss), out[miss], spread):
        report.values[(int(i), int(j))] = float(v)
        report.std[(int(i), int(j))] = float(s)
    report.repetitions = repetitions
    if report.fallbacks:
        log.info("least-squares fallback used %d times", report.fallbacks)
    return CompositionTable(out, row_ids, labels), report


def impute_table(table: CompositionTable, history: HistoricalSeries | None = None,
                 target_year: int | None = None, repetitions=100, seed=0, **kwargs):
    """Trend imputation first, then the iterative stage on the remaining cells."""
    values = np.array(table.values, dtype=float)
    miss = np.isnan(values)
    MissingMask(miss)
    tags = np.full(values.shape, OBSERVED, dtype=object)
    trend_values = {}
    if history is not None and target_year is not None:
        for i, j in np.argwhere(miss):
            pred = impute_by_trend(history.get(table.row_ids[i], table.labels[j]), target_year)
            if pred is not None:
                values[i, j] = pred
                tags[i, j] = TREND
                trend_values[(int(i), int(j))] = pred
    staged = CompositionTable(values, table.row_ids, table.labels, allow_missing=True)
    filled, report = impute_iterative(staged, repetitions=repetitions, seed=seed,
                                      methods=tags, **kwargs)
    report.values.update(trend_values)
    report.std.update({key: 0.0 for key in trend_values})
    report.settings["target_year"] = target_year
    return filled, report
