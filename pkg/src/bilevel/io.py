"""CSV ingestion and report files.

Floats are written with ``repr`` so a file read back gives the same
doubles. Nothing written here depends on wall-clock time unless the caller
puts it there.
"""

from __future__ import annotations

import csv
import json
import math
import platform
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from .model import Dataset, GroupStructure, ValidationError


class DataError(ValueError):
    """Malformed or missing input data."""


@dataclass(frozen=True)
class LoadedData:
    dataset: Dataset
    features: tuple[str, ...]
    group_ids: tuple[str, ...]
    response: str


def _fmt(x) -> str:
    return repr(float(x))


def _read_rows(path) -> tuple[list[str], list[list[str]]]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such file")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        raise DataError(f"{path}: duplicate column names in header")
    body = rows[1:]
    for i, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise DataError(f"{path}, line {i}: expected {len(header)} fields, got {len(row)}")
    return header, body


def read_group_map(path) -> dict[str, str]:
    """Two-column ``feature,group_id`` CSV (header required)."""
    header, body = _read_rows(path)
    if len(header) != 2:
        raise DataError(f"{path}: group map needs exactly two columns")
    out: dict[str, str] = {}
    for i, (feat, gid) in enumerate(body, start=2):
        feat, gid = feat.strip(), gid.strip()
        if feat in out:
            raise DataError(f"{path}, line {i}: feature {feat!r} listed twice")
        out[feat] = gid
    return out


def _group_sort_key(ids: Sequence[str]):
    try:
        nums = {g: float(g) for g in ids}
    except ValueError:
        return lambda g: g
    return lambda g: nums[g]


def load_csv(path, response: str, group_map: dict[str, str] | None = None,
             auto_group_size: int | None = None) -> LoadedData:
    """Read a numeric CSV into a grouped :class:`Dataset`.

    Exactly one of ``group_map`` (feature name to group id) or
    ``auto_group_size`` (consecutive blocks in file order; the last block
    may be shorter) must be given. Columns are reordered by group id and
    then by their position in the file so every group is contiguous.
    """
    if (group_map is None) == (auto_group_size is None):
        raise ValidationError("give exactly one of group_map or auto_group_size")
    header, body = _read_rows(path)
    if response not in header:
        raise DataError(f"{path}: response column {response!r} not found")
    if not body:
        raise DataError(f"{path}: header but no data rows")
    features = [h for h in header if h != response]
    if not features:
        raise DataError(f"{path}: no feature columns")

    if group_map is not None:
        missing = [f for f in features if f not in group_map]
        if missing:
            raise DataError(f"group map has no entry for feature(s) {missing[:5]}")
        ids = [group_map[f] for f in features]
    else:
        if auto_group_size < 1:
            raise ValidationError("auto group size must be >= 1")
        ids = [str(i // auto_group_size + 1) for i in range(len(features))]

    key = _group_sort_key(ids)
    order = sorted(range(len(features)), key=lambda i: (key(ids[i]), i))
    col_of = {h: c for c, h in enumerate(header)}

    values = np.empty((len(body), len(header)))
    for r, row in enumerate(body):
        for c, cell in enumerate(row):
            try:
                values[r, c] = float(cell)
            except ValueError:
                raise DataError(f"{path}, data row {r + 1} (line {r + 2}), column "
                                f"{header[c]!r}: non-numeric value {cell!r}") from None
            if not math.isfinite(values[r, c]):
                raise DataError(f"{path}, data row {r + 1} (line {r + 2}), column "
                                f"{header[c]!r}: non-finite value {cell!r}")

    feats = [features[i] for i in order]
    gids = [ids[i] for i in order]
    sizes = []
    for i, g in enumerate(gids):
        if i == 0 or g != gids[i - 1]:
            sizes.append(0)
        sizes[-1] += 1
    X = values[:, [col_of[f] for f in feats]]
    y = values[:, col_of[response]]
    data = Dataset(X, y, GroupStructure(tuple(sizes)))
    return LoadedData(data, tuple(feats), tuple(gids), response)


def write_csv(path, header: Sequence[str], rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for row in rows:
            wr.writerow([_fmt(x) if isinstance(x, (float, np.floating)) else x for x in row])


def write_coefficients(path, features: Sequence[str], group_ids: Sequence[str],
                       beta: NDArray) -> None:
    """``feature,group,value`` for every nonzero coefficient, in column order."""
    rows = [(features[m], group_ids[m], float(beta[m]))
            for m in np.flatnonzero(np.asarray(beta) != 0)]
    write_csv(path, ("feature", "group", "value"), rows)


def read_coefficients(path) -> list[tuple[str, str, float]]:
    header, body = _read_rows(path)
    if header != ["feature", "group", "value"]:
        raise DataError(f"{path}: not a coefficient file")
    return [(f, g, float(v)) for f, g, v in body]


def write_cv_table(path, lam_values, theta_values, table: NDArray) -> None:
    rows = [(float(lam), float(theta), float(table[a, b]))
            for a, lam in enumerate(lam_values) for b, theta in enumerate(theta_values)]
    write_csv(path, ("lambda", "theta", "score"), rows)


def write_experiment_table(path, methods: Sequence[str], values: NDArray,
                           columns: Sequence[str]) -> None:
    rows = [(m, *[float(x) for x in values[i]]) for i, m in enumerate(methods)]
    write_csv(path, ("method", *columns), rows)


def read_table(path) -> tuple[list[str], list[list[str]]]:
    return _read_rows(path)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else repr(x)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def write_json(path, payload: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")


def read_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such file")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None


def versions() -> dict[str, str]:
    import scipy

    from . import __version__
    return {"bilevel": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}
