"""CSV and JSON files for datasets.

Stores CSV: ``id,x,y,revenue,f1..f{D-2}``. Customers CSV: ``id,x,y,f1..f{P-2}``.
Headers are mandatory. Feature columns are the ones named ``f<k>``, taken in
numeric order; any other extra column is ignored by the loaders (it can still
be read with :func:`read_column`, e.g. for grouping). Numbers are parsed with
``float`` and written with ``repr``, so neither side depends on the locale.
"""

from __future__ import annotations

import csv
import json
import re
from pathlib import Path

import numpy as np

from .geometry import Polygon
from .model import Dataset

STORE_COLUMNS = ("id", "x", "y", "revenue")
CUSTOMER_COLUMNS = ("id", "x", "y")
_FEATURE = re.compile(r"^f(\d+)$")


class DataFormatError(ValueError):
    pass


def _read_table(path: str | Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise DataFormatError(f"{path}: empty file (a header row is required)")
    header = [h.strip() for h in rows[0]]
    body = rows[1:]
    for i, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise DataFormatError(f"{path}: line {i} has {len(r)} fields, header has {len(header)}")
    return header, body


def _feature_columns(header: list[str]) -> list[str]:
    feats = sorted((int(m.group(1)), h) for h in header if (m := _FEATURE.match(h)))
    return [h for _, h in feats]


def _floats(path, header, body, name) -> np.ndarray:
    j = header.index(name)
    out = np.empty(len(body))
    for i, r in enumerate(body):
        try:
            out[i] = float(r[j])
        except ValueError:
            raise DataFormatError(f"{path}: column '{name}' row {i + 1}: not a number: {r[j]!r}") from None
    return out


def _require(path, header, required) -> None:
    for col in required:
        if col not in header:
            raise DataFormatError(f"{path}: missing required column '{col}'")


def read_stores(path: str | Path) -> dict:
    header, body = _read_table(path)
    _require(path, header, STORE_COLUMNS)
    feats = _feature_columns(header)
    return {
        "ids": [r[header.index("id")] for r in body],
        "xy": np.column_stack([_floats(path, header, body, "x"), _floats(path, header, body, "y")]),
        "revenue": _floats(path, header, body, "revenue"),
        "features": np.column_stack([_floats(path, header, body, f) for f in feats]) if feats
        else np.zeros((len(body), 0)),
    }


def read_customers(path: str | Path) -> dict:
    header, body = _read_table(path)
    _require(path, header, CUSTOMER_COLUMNS)
    feats = _feature_columns(header)
    return {
        "ids": [r[header.index("id")] for r in body],
        "xy": np.column_stack([_floats(path, header, body, "x"), _floats(path, header, body, "y")]),
        "features": np.column_stack([_floats(path, header, body, f) for f in feats]) if feats
        else np.zeros((len(body), 0)),
    }


def read_column(path: str | Path, name: str) -> list[str]:
    """Raw string values of one column."""
    header, body = _read_table(path)
    _require(path, header, (name,))
    j = header.index(name)
    return [r[j] for r in body]


def read_region(path: str | Path) -> Polygon:
    try:
        return Polygon.from_json(path)
    except (json.JSONDecodeError, TypeError, KeyError, ValueError) as exc:
        raise DataFormatError(f"{path}: invalid region polygon: {exc}") from None


def load_dataset(stores: str | Path, customers: str | Path, region: str | Path | None = None) -> Dataset:
    st, cu = read_stores(stores), read_customers(customers)
    if not st["ids"]:
        raise DataFormatError(f"{stores}: no store rows")
    if not cu["ids"]:
        raise DataFormatError(f"{customers}: no customer rows")
    return Dataset(
        store_ids=st["ids"],
        store_xy=st["xy"],
        store_features=st["features"],
        revenue=st["revenue"],
        customer_ids=cu["ids"],
        customer_xy=cu["xy"],
        customer_features=cu["features"],
        region=read_region(region) if region else None,
    )


def _fmt(v: float) -> str:
    return repr(float(v))


def write_stores(dataset: Dataset, path: str | Path) -> None:
    feats = [f"f{k + 1}" for k in range(dataset.n_store_features)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*STORE_COLUMNS, *feats])
        for s in range(dataset.n_stores):
            w.writerow([
                dataset.store_ids[s], _fmt(dataset.store_xy[s, 0]), _fmt(dataset.store_xy[s, 1]),
                _fmt(dataset.revenue[s]), *map(_fmt, dataset.store_features[s]),
            ])


def write_customers(dataset: Dataset, path: str | Path, extra: dict[str, list] | None = None) -> None:
    feats = [f"f{k + 1}" for k in range(dataset.n_customer_features)]
    extra = extra or {}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*CUSTOMER_COLUMNS, *feats, *extra])
        for n in range(dataset.n_customers):
            w.writerow([
                dataset.customer_ids[n], _fmt(dataset.customer_xy[n, 0]), _fmt(dataset.customer_xy[n, 1]),
                *map(_fmt, dataset.customer_features[n]), *(str(col[n]) for col in extra.values()),
            ])


def write_region(poly: Polygon, path: str | Path) -> None:
    poly.to_json(path)


def dump_json(obj, path: str | Path) -> None:
    """Deterministic JSON (sorted keys, fixed indent, trailing newline)."""
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")
