"""Reading and validating the stores / transactions / crimes tables.

All three inputs are comma-separated UTF-8 files with named columns.  Months
may be given as ISO dates (``2019-04`` or ``2019-04-01``) or as integer month
indices; either way they are converted to ``year * 12 + month - 1`` so that
nothing downstream has to do calendar arithmetic.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import MalformedRow, NonPositiveQuantity, OutOfRangeCoordinate, UnknownStore

log = logging.getLogger(__name__)

STORE_COLUMNS = ["store_id", "latitude", "longitude", "firm_id"]
STORE_OPTIONAL = ["urban_flag"]
TRANSACTION_COLUMNS = [
    "store_id",
    "product_producer",
    "product_category",
    "product_name",
    "unit_weight",
    "month",
    "retail_revenue",
    "retail_quantity",
    "wholesale_expenditure",
    "wholesale_quantity",
]
CRIME_COLUMNS = ["store_id", "month", "kind"]
CRIME_KINDS = ("robbery", "burglary")
PRODUCT_KEY = ["product_producer", "product_category", "product_name", "unit_weight"]
CELL_KEY = ["store_id", *PRODUCT_KEY, "month"]

_ISO_MONTH = re.compile(r"^(\d{4})-(\d{2})(?:-(\d{2}))?$")
_TRUE = {"1", "true", "t", "yes", "y"}
_FALSE = {"0", "false", "f", "no", "n", ""}


@dataclass(frozen=True)
class Tables:
    stores: pd.DataFrame
    transactions: pd.DataFrame
    crimes: pd.DataFrame

    @property
    def row_counts(self) -> dict[str, int]:
        return {
            "stores": len(self.stores),
            "transactions": len(self.transactions),
            "crimes": len(self.crimes),
        }


def month_index(year: int, month: int) -> int:
    return year * 12 + month - 1


def month_label(index: int) -> str:
    """Inverse of :func:`month_index`, formatted ``YYYY-MM``."""
    year, m = divmod(int(index), 12)
    return f"{year:04d}-{m + 1:02d}"


def parse_month(text: str) -> int:
    text = text.strip()
    match = _ISO_MONTH.match(text)
    if match:
        year, month = int(match.group(1)), int(match.group(2))
        if not 1 <= month <= 12:
            raise ValueError(f"month {month} out of range")
        return month_index(year, month)
    if re.fullmatch(r"-?\d+", text):
        return int(text)
    raise ValueError(f"cannot parse month {text!r}")


def _read_raw(path, required: list[str], optional: list[str] = ()) -> pd.DataFrame:
    path = Path(path)
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    columns = list(frame.columns)
    missing = [c for c in required if c not in columns]
    if missing:
        raise MalformedRow(path, 1, missing[0], "missing from header")
    extra = [c for c in columns if c not in required and c not in optional]
    if extra:
        raise MalformedRow(path, 1, extra[0], "unexpected column in header")
    return frame


def _line(position: int) -> int:
    # header is line 1
    return position + 2


def _numeric(frame: pd.DataFrame, column: str, path) -> np.ndarray:
    text = frame[column].str.strip()
    try:
        # numpy's parser rounds correctly, so written floats read back bit for bit
        values = text.to_numpy(dtype=str).astype(float)
    except ValueError:
        values = pd.to_numeric(text, errors="coerce").to_numpy(dtype=float)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        pos = int(bad[0])
        raise MalformedRow(path, _line(pos), column, f"not a finite number: {frame[column].iloc[pos]!r}")
    return values


def _months(frame: pd.DataFrame, path) -> np.ndarray:
    out = np.empty(len(frame), dtype=np.int64)
    for pos, text in enumerate(frame["month"].to_numpy()):
        try:
            out[pos] = parse_month(text)
        except ValueError as exc:
            raise MalformedRow(path, _line(pos), "month", str(exc)) from None
    return out


def _ids(frame: pd.DataFrame, column: str, path) -> np.ndarray:
    values = frame[column].str.strip()
    empty = np.flatnonzero((values == "").to_numpy())
    if empty.size:
        raise MalformedRow(path, _line(int(empty[0])), column, "empty identifier")
    return values.to_numpy(dtype=object)


def read_stores(path) -> pd.DataFrame:
    raw = _read_raw(path, STORE_COLUMNS, STORE_OPTIONAL)
    store_id = _ids(raw, "store_id", path)
    dup = pd.Series(store_id).duplicated().to_numpy()
    if dup.any():
        pos = int(np.flatnonzero(dup)[0])
        raise MalformedRow(path, _line(pos), "store_id", f"duplicate store_id {store_id[pos]!r}")
    lat = _numeric(raw, "latitude", path)
    lon = _numeric(raw, "longitude", path)
    for column, values, bound in (("latitude", lat, 90.0), ("longitude", lon, 180.0)):
        bad = np.flatnonzero(np.abs(values) > bound)
        if bad.size:
            pos = int(bad[0])
            raise OutOfRangeCoordinate(path, _line(pos), column, float(values[pos]))
    stores = pd.DataFrame(
        {
            "store_id": store_id,
            "latitude": lat,
            "longitude": lon,
            "firm_id": _ids(raw, "firm_id", path),
        }
    )
    if "urban_flag" in raw.columns:
        flags = []
        for pos, text in enumerate(raw["urban_flag"].str.strip().str.lower()):
            if text in _TRUE:
                flags.append(True)
            elif text in _FALSE:
                flags.append(False)
            else:
                raise MalformedRow(path, _line(pos), "urban_flag", f"not a boolean: {text!r}")
        stores["urban_flag"] = flags
    return stores.sort_values("store_id", kind="stable").reset_index(drop=True)


def read_transactions(path, known_stores=None, window: tuple[int, int] | None = None) -> pd.DataFrame:
    raw = _read_raw(path, TRANSACTION_COLUMNS)
    out = pd.DataFrame({"store_id": _ids(raw, "store_id", path)})
    for column in PRODUCT_KEY:
        out[column] = raw[column].str.strip().to_numpy(dtype=object)
    for column in ("product_producer", "product_category", "product_name"):
        _ids(raw, column, path)
    out["month"] = _months(raw, path)
    for column in ("retail_revenue", "retail_quantity", "wholesale_expenditure", "wholesale_quantity"):
        values = _numeric(raw, column, path)
        negative = np.flatnonzero(values < 0)
        if negative.size:
            pos = int(negative[0])
            if column.endswith("quantity"):
                raise NonPositiveQuantity(path, _line(pos), column, f"negative quantity {values[pos]}")
            raise MalformedRow(path, _line(pos), column, f"negative amount {values[pos]}")
        out[column] = values

    # a retail price is formed wherever revenue is positive, so the quantity must be too;
    # zero-revenue, zero-quantity rows are only meaningful as wholesale-only purchases
    rq, rr = out["retail_quantity"].to_numpy(), out["retail_revenue"].to_numpy()
    wq, we = out["wholesale_quantity"].to_numpy(), out["wholesale_expenditure"].to_numpy()
    bad = np.flatnonzero((rq == 0) & ((rr > 0) | (wq == 0)))
    if bad.size:
        pos = int(bad[0])
        raise NonPositiveQuantity(path, _line(pos), "retail_quantity", "zero quantity on a retail row")
    bad = np.flatnonzero((wq == 0) & (we > 0))
    if bad.size:
        pos = int(bad[0])
        raise NonPositiveQuantity(path, _line(pos), "wholesale_quantity", "zero quantity with positive expenditure")

    if window is not None:
        lo, hi = window
        bad = np.flatnonzero((out["month"] < lo) | (out["month"] > hi))
        if bad.size:
            pos = int(bad[0])
            raise MalformedRow(path, _line(pos), "month", f"month {month_label(out['month'].iloc[pos])} outside sample window")
    if known_stores is not None:
        _check_stores(out["store_id"], known_stores, path)
    return out


def read_crimes(path, known_stores=None) -> pd.DataFrame:
    raw = _read_raw(path, CRIME_COLUMNS)
    out = pd.DataFrame({"store_id": _ids(raw, "store_id", path), "month": _months(raw, path)})
    kinds = raw["kind"].str.strip().str.lower()
    bad = np.flatnonzero(~kinds.isin(CRIME_KINDS).to_numpy())
    if bad.size:
        pos = int(bad[0])
        raise MalformedRow(path, _line(pos), "kind", f"expected one of {CRIME_KINDS}, got {raw['kind'].iloc[pos]!r}")
    out["kind"] = kinds.to_numpy(dtype=object)
    if known_stores is not None:
        _check_stores(out["store_id"], known_stores, path)
    return out.sort_values(["month", "store_id"], kind="stable").reset_index(drop=True)


def _check_stores(ids: pd.Series, known, path) -> None:
    known = set(known)
    missing = np.flatnonzero(~ids.isin(known).to_numpy())
    if missing.size:
        pos = int(missing[0])
        raise UnknownStore(path, _line(pos), ids.iloc[pos])


def ingest_tables(stores_csv, transactions_csv, crimes_csv, window: tuple[int, int] | None = None) -> Tables:
    """Parse the three input files and enforce referential integrity.

    Raises
    ------
    MalformedRow, UnknownStore, NonPositiveQuantity, OutOfRangeCoordinate
        On the first offending row, with file name and line number.
    """
    stores = read_stores(stores_csv)
    transactions = read_transactions(transactions_csv, stores["store_id"], window=window)
    crimes = read_crimes(crimes_csv, stores["store_id"])
    tables = Tables(stores, transactions, crimes)
    log.info("ingested %s", tables.row_counts)
    return tables


def build_product_month_panel(transactions: pd.DataFrame) -> pd.DataFrame:
    """Aggregate transactions to one cell per (store, product, month).

    ``retail_price`` is total revenue over total quantity and is absent (NaN)
    for cells without retail sales; ``wholesale_price`` likewise requires a
    positive wholesale quantity.  Rows are put in a canonical order before
    summing so that the result does not depend on the input row order.
    """
    value_cols = ["retail_revenue", "retail_quantity", "wholesale_expenditure", "wholesale_quantity"]
    tx = transactions[CELL_KEY + value_cols]
    cell = tx.groupby(CELL_KEY, sort=True, observed=True).ngroup().to_numpy()
    if cell.size and np.unique(cell).size < cell.size:
        # several rows per cell: fix the summation order
        tx = tx.sort_values(CELL_KEY + value_cols, kind="stable")
    grouped = tx.groupby(CELL_KEY, sort=True, observed=True)[value_cols].sum()
    panel = grouped.reset_index()
    rq = panel["retail_quantity"].to_numpy()
    wq = panel["wholesale_quantity"].to_numpy()
    with np.errstate(divide="ignore", invalid="ignore"):
        panel["retail_price"] = np.where(rq > 0, panel["retail_revenue"].to_numpy() / rq, np.nan)
        panel["wholesale_price"] = np.where(wq > 0, panel["wholesale_expenditure"].to_numpy() / wq, np.nan)
    return panel
