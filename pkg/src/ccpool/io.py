"""CSV input and output for pooled case-control data.

The format is a header ``study,y,x1,...,xd`` followed by one row per
observation.  Study labels must be the integers ``1..K``.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .model import DataError, PooledData

__all__ = ["read_csv", "write_csv"]


def read_csv(path) -> PooledData:
    """Parse a pooled data file.

    Raises
    ------
    DataError
        With the offending line number for malformed rows, or naming the
        study for an empty case or control pool.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        d = len(header) - 2
        expected = ["study", "y"] + [f"x{j}" for j in range(1, d + 1)]
        if d < 1 or header != expected:
            raise DataError(f"{path}: header must be 'study,y,x1,...,xd', got {','.join(header)!r}")
        study, y, x = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != d + 2:
                raise DataError(f"{path}:{lineno}: expected {d + 2} fields, got {len(row)}")
            try:
                k = int(row[0])
                yy = int(row[1])
                xx = [float(c) for c in row[2:]]
            except ValueError as err:
                raise DataError(f"{path}:{lineno}: {err}") from None
            if yy not in (0, 1):
                raise DataError(f"{path}:{lineno}: y must be 0 or 1, got {row[1]!r}")
            if not all(np.isfinite(xx)):
                raise DataError(f"{path}:{lineno}: non-finite covariate")
            study.append(k)
            y.append(yy)
            x.append(xx)
    if not study:
        raise DataError(f"{path}: no data rows")
    labels = sorted(set(study))
    if labels != list(range(1, len(labels) + 1)):
        raise DataError(f"{path}: study labels must be 1..K, got {labels}")
    return PooledData.from_arrays(study, y, np.array(x))


def write_csv(data: PooledData, path) -> None:
    """Write ``data`` in the input format; floats round-trip exactly."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["study", "y"] + [f"x{j}" for j in range(1, data.d + 1)])
        for k, s in enumerate(data.studies, start=1):
            for yi, xi in zip(s.y, s.x):
                w.writerow([k, int(yi)] + [repr(float(v)) for v in xi])
