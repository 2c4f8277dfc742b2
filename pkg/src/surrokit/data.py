"""CSV ingestion and export."""

from __future__ import annotations

import csv
import math

import numpy as np

from .core import TrainingSample
from .errors import DataError


def _split_names(names):
    if names is None:
        return []
    if isinstance(names, str):
        names = names.split(",")
    return [n.strip() for n in names if n.strip()]


def read_table(path):
    """Header and rows of a CSV file; the header must be present."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror or exc}") from exc
    rows = [r for r in rows if any(c.strip() for c in r)]
    if not rows:
        raise DataError(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    return header, rows[1:]


def _column(header, name, path):
    try:
        return header.index(name)
    except ValueError:
        raise DataError(f"column {name!r} not found in {path}") from None


def _numeric(rows, col, name):
    out = np.empty(len(rows))
    for i, row in enumerate(rows):
        # row numbers count the header as row 1, as a spreadsheet would
        cell = row[col].strip() if col < len(row) else ""
        try:
            v = float(cell)
        except ValueError:
            raise DataError(f"non-numeric value {cell!r} in column {name!r} at row {i + 2}") from None
        if not math.isfinite(v):
            raise DataError(f"non-finite value {cell!r} in column {name!r} at row {i + 2}")
        out[i] = v
    return out


def _categorical(rows, col, name, labels=None):
    """Integer codes for a text column; ``labels`` fixes the code order when given."""
    cells = [(row[col].strip() if col < len(row) else "") for row in rows]
    if labels is None:
        labels = sorted(set(cells))
    index = {lab: k for k, lab in enumerate(labels)}
    codes = np.empty(len(cells))
    for i, c in enumerate(cells):
        if c not in index:
            raise DataError(f"unknown category {c!r} in column {name!r} at row {i + 2}")
        codes[i] = index[c]
    return codes, list(labels)


def load_csv(path, input_columns, output_columns=None, categorical=None, categories=None) -> TrainingSample:
    """Parse named columns of a CSV file into a TrainingSample.

    ``categorical`` lists input columns holding labels; they are stored as
    integer codes (sorted label order, or the order in ``categories`` when a
    trained model supplies one).  With no output columns the sample has zero
    output columns, which is what prediction needs.
    """
    inputs = _split_names(input_columns)
    outputs = _split_names(output_columns)
    cats = set(_split_names(categorical))
    if not inputs:
        raise DataError("no input columns given")
    unknown = cats - set(inputs)
    if unknown:
        raise DataError(f"categorical column {sorted(unknown)[0]!r} is not an input column")
    header, rows = read_table(path)
    if not rows:
        raise DataError(f"{path} has a header but no data rows")
    x = np.empty((len(rows), len(inputs)))
    found = {}
    for j, name in enumerate(inputs):
        col = _column(header, name, path)
        if name in cats:
            given = (categories or {}).get(j)
            x[:, j], found[j] = _categorical(rows, col, name, given)
        else:
            x[:, j] = _numeric(rows, col, name)
    y = np.empty((len(rows), len(outputs)))
    for j, name in enumerate(outputs):
        y[:, j] = _numeric(rows, _column(header, name, path), name)
    return TrainingSample(x, y, input_names=inputs, output_names=outputs,
                          categorical_mask=[n in cats for n in inputs], categories=found)


def write_csv(path, columns, values):
    values = np.asarray(values, float)
    values = values.reshape(len(values), -1)
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(columns)
            for row in values:
                w.writerow([repr(float(v)) for v in row])
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc.strerror or exc}") from exc
