"""Reading and preprocessing the input tables."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..coda import CompositionTable
from ..errors import ConfigError, DuplicateEntity, NegativeValue, ParseError
from ..impute import HistoricalSeries, MissingMask

MISSING_TOKENS = {"", "na", "nan", "n/a", ".."}


@dataclass
class IngestResult:
    table: CompositionTable
    mask: MissingMask
    history: HistoricalSeries | None
    log: list


def read_table(path):
    """Parse the main CSV into ``(row_ids, labels, values)``.

    The first column holds entity ids, the header row component names.
    Empty cells (or ``NA``, ``NaN``, ``..``) become NaN.

    Raises
    ------
    ParseError
        With 1-based file ``row`` and ``column`` for malformed cells.
    NegativeValue
        For negative numbers.
    DuplicateEntity
        When an entity id appears twice.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8-sig") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(f"{path} is empty", row=1)
    header = [h.strip() for h in rows[0]]
    if len(header) < 3:
        raise ParseError("need an id column and at least two components", row=1)
    labels = header[1:]
    if len(set(labels)) != len(labels):
        raise ParseError("duplicate component names in header", row=1)
    ids, values = [], []
    for r, row in enumerate(rows[1:], start=2):
        if not any(cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            raise ParseError(f"row {r} has {len(row)} fields, expected {len(header)}", row=r)
        entity = row[0].strip()
        if not entity:
            raise ParseError(f"row {r} has no entity id", row=r, column=1)
        if entity in ids:
            raise DuplicateEntity(f"entity {entity!r} appears twice (row {r})")
        parsed = []
        for c, cell in enumerate(row[1:], start=2):
            token = cell.strip()
            if token.lower() in MISSING_TOKENS:
                parsed.append(math.nan)
                continue
            try:
                v = float(token)
            except ValueError:
                raise ParseError(f"row {r}, column {c}: cannot parse {token!r}",
                                 row=r, column=c) from None
            if not math.isfinite(v):
                raise ParseError(f"row {r}, column {c}: value {token!r} is not finite", row=r, column=c)
            if v < 0:
                raise NegativeValue(f"row {r}, column {c} ({labels[c - 2]}): negative value {v}")
            if v == 0:
                raise ParseError(f"row {r}, column {c}: zero is not a valid part", row=r, column=c)
            parsed.append(v)
        ids.append(entity)
        values.append(parsed)
    if not ids:
        raise ParseError(f"{path} has no data rows", row=2)
    return ids, labels, np.array(values, dtype=float)


def aggregate_rows(ids, values, groups):
    """Replace each group of rows by their arithmetic mean.

    The merged row takes the position of the group's first member. Missing
    cells are ignored in the mean; a cell missing for every member stays
    missing.
    """
    ids = list(ids)
    values = np.asarray(values, dtype=float)
    log = []
    for new_id, members in groups.items():
        absent = [m for m in members if m not in ids]
        if absent:
            raise ConfigError(f"aggregate {new_id}: unknown rows {absent}")
        if new_id in ids and new_id not in members:
            raise DuplicateEntity(f"aggregate id {new_id!r} already names a row")
        idx = [ids.index(m) for m in members]
        block = values[idx]
        observed = ~np.isnan(block)
        counts = observed.sum(axis=0)
        merged = np.where(counts > 0, np.where(observed, block, 0.0).sum(axis=0) / np.maximum(counts, 1),
                          np.nan)
        first = min(idx)
        keep = [i for i in range(len(ids)) if i not in idx or i == first]
        values = values.copy()
        values[first] = merged
        ids[first] = new_id
        values = values[keep]
        ids = [ids[i] for i in keep]
        log.append(f"aggregated {list(members)} into {new_id} by arithmetic mean")
    return ids, values, log


def ingest(config) -> IngestResult:
    """Load, aggregate and filter the inputs named in ``config``."""
    ids, labels, values = read_table(config.table)
    ids, values, log = aggregate_rows(ids, values, config.aggregate)
    for r in config.exclude_rows:
        if r not in ids:
            raise ConfigError(f"excluded row {r!r} is not in the table")
    for c in config.exclude_columns:
        if c not in labels:
            raise ConfigError(f"excluded column {c!r} is not in the table")
    rows = [i for i, r in enumerate(ids) if r not in set(config.exclude_rows)]
    cols = [j for j, c in enumerate(labels) if c not in set(config.exclude_columns)]
    if config.exclude_rows:
        log.append(f"excluded rows {list(config.exclude_rows)}")
    if config.exclude_columns:
        log.append(f"excluded columns {list(config.exclude_columns)}")
    values = values[np.ix_(rows, cols)]
    ids = [ids[i] for i in rows]
    labels = [labels[j] for j in cols]
    table = CompositionTable(values, ids, labels, allow_missing=True)
    mask = MissingMask.from_values(values)
    history = HistoricalSeries.from_csv(config.history) if config.history else None
    log.append(f"table {len(ids)} x {len(labels)} with {mask.total} missing cells")
    return IngestResult(table, mask, history, log)
