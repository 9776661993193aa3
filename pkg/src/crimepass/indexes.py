"""Store-level Young price, quantity and wholesale-cost indexes.

Each index is built in two steps.  Within a subcategory (a category / unit
weight pair) the month-over-month relatives of matched products are combined
in a weighted geometric mean, using annual revenue (or wholesale expenditure)
shares as weights.  The subcategory relatives are then combined across
subcategories with the subcategories' annual shares.  Only products observed
in both adjacent months enter, and weights are renormalized over whatever is
matched; a store-month with nothing matched is a gap.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import NonPositivePrice
from .ingest import PRODUCT_KEY

WEIGHTING_YEARS = ("calendar", "fiscal-July")
STORES_PER_CHUNK = 64
INDEX_COLUMNS = ["log_price_index", "log_quantity_index", "log_cost_index"]


def weight_year(month, weighting_year: str = "calendar"):
    """Year label of an integer month index.

    ``fiscal-July`` years run July through June and are labelled by the
    calendar year in which they start.
    """
    if weighting_year == "calendar":
        return np.asarray(month) // 12
    if weighting_year == "fiscal-July":
        return (np.asarray(month) - 6) // 12
    raise ValueError(f"weighting_year must be one of {WEIGHTING_YEARS}")


@dataclass(frozen=True)
class WeightTable:
    """Annual shares.

    ``product`` holds the share of each product within its subcategory,
    ``subcategory`` the share of each subcategory within the store, both per
    store and weighting year.
    """

    product: pd.DataFrame
    subcategory: pd.DataFrame


def _share(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


def _dense(*arrays) -> tuple[np.ndarray, int]:
    """Sorted dense codes for the combination of integer arrays."""
    combined = np.zeros(len(arrays[0]), dtype=np.int64)
    for a in arrays:
        a = np.asarray(a, dtype=np.int64)
        if a.size == 0:
            return np.zeros(0, dtype=np.int64), 0
        lo = a.min()
        combined = combined * (int(a.max() - lo) + 1) + (a - lo)
    codes, uniques = pd.factorize(combined, sort=True)
    return codes.astype(np.int64), len(uniques)


def _prepare(cells: pd.DataFrame, weighting_year: str) -> dict:
    month = cells["month"].to_numpy(dtype=np.int64)
    store, _ = pd.factorize(cells["store_id"], sort=True)
    # integer codes; only compared within one call
    product = cells.groupby(PRODUCT_KEY, sort=True, observed=True, dropna=False).ngroup().to_numpy()
    sub = cells.groupby(["product_category", "unit_weight"], sort=True, observed=True, dropna=False).ngroup().to_numpy()
    return {
        "store": store.astype(np.int64),
        "product": product.astype(np.int64),
        "sub": sub.astype(np.int64),
        "month": month,
        "year": weight_year(month, weighting_year).astype(np.int64),
    }


def _row_weights(f: dict, basis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row annual product-in-subcategory share and subcategory-in-store share."""
    pk, npk = _dense(f["store"], f["year"], f["product"])
    sk, nsk = _dense(f["store"], f["year"], f["sub"])
    yk, nyk = _dense(f["store"], f["year"])
    p_tot = np.bincount(pk, weights=basis, minlength=npk)
    s_tot = np.bincount(sk, weights=basis, minlength=nsk)
    y_tot = np.bincount(yk, weights=basis, minlength=nyk)
    return _share(p_tot[pk], s_tot[sk]), _share(s_tot[sk], y_tot[yk])


def compute_weights(cells: pd.DataFrame, basis: str = "retail_revenue", weighting_year: str = "calendar") -> WeightTable:
    """Annual product and subcategory shares of ``basis`` (revenue or wholesale expenditure).

    Zero-total groups get zero weight.
    """
    f = _prepare(cells, weighting_year)
    wp, ws = _row_weights(f, cells[basis].to_numpy(dtype=float))
    frame = cells[["store_id", "product_category", "unit_weight", "product_producer", "product_name"]].copy()
    frame["year"] = f["year"]
    frame["weight"] = wp
    product = frame.drop_duplicates(["store_id", *PRODUCT_KEY, "year"]).sort_values(
        ["store_id", "product_category", "unit_weight", "product_producer", "product_name", "year"], kind="stable"
    )
    frame["weight"] = ws
    sub = frame.drop_duplicates(["store_id", "product_category", "unit_weight", "year"]).sort_values(
        ["store_id", "product_category", "unit_weight", "year"], kind="stable"
    )
    return WeightTable(
        product.reset_index(drop=True),
        sub[["store_id", "product_category", "unit_weight", "year", "weight"]].reset_index(drop=True),
    )


# scalar reference implementation -------------------------------------------


def subcategory_relative(current: dict, previous: dict, weights: dict):
    """Weighted geometric mean of matched-product relatives, or ``None`` if nothing matches.

    ``current``/``previous`` map product -> price (or quantity); ``weights``
    maps product -> annual share.  Products missing from either month or with
    zero weight are dropped and the remaining weights renormalized.
    """
    matched = [p for p in current if p in previous and weights.get(p, 0.0) > 0]
    if not matched:
        return None
    total = math.fsum(weights[p] for p in matched)
    log_rel = 0.0
    for p in matched:
        if current[p] <= 0 or previous[p] <= 0:
            raise NonPositivePrice(f"product {p!r} has non-positive value")
        log_rel += weights[p] / total * math.log(current[p] / previous[p])
    return math.exp(log_rel)


def store_index(relatives: dict, weights: dict):
    """Aggregate subcategory relatives into ``(I, ln I)``; ``None`` if none defined."""
    defined = [c for c, r in relatives.items() if r is not None and weights.get(c, 0.0) > 0]
    if not defined:
        return None
    total = math.fsum(weights[c] for c in defined)
    pi = sum(weights[c] / total * math.log(relatives[c]) for c in defined)
    return math.exp(pi), pi


# vectorized production path --------------------------------------------------


def _log_index(f: dict, order: np.ndarray, value: np.ndarray, wp: np.ndarray, ws: np.ndarray, label: str):
    """Two-stage weighted log index on rows sorted by (store, product, month)."""
    store, product, month, sub = (f[c][order] for c in ("store", "product", "month", "sub"))
    v, wp, ws = value[order], wp[order], ws[order]
    ok = np.isfinite(v)
    prev = np.zeros(len(v), dtype=bool)
    prev[1:] = (store[1:] == store[:-1]) & (product[1:] == product[:-1]) & (month[1:] == month[:-1] + 1) & ok[:-1]
    m = ok & prev & (wp > 0)
    cur_v = v[m]
    prev_v = v[np.flatnonzero(m) - 1]
    bad = (cur_v <= 0) | (prev_v <= 0)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise NonPositivePrice(f"{label}: non-positive value in month {month[m][i]} (store code {store[m][i]})")
    lr = np.log(cur_v) - np.log(prev_v)
    w = wp[m]
    gk, ng = _dense(store[m], sub[m], month[m])
    sub_lr = np.bincount(gk, weights=w * lr, minlength=ng) / np.bincount(gk, weights=w, minlength=ng)
    g_ws = np.zeros(ng)
    g_store = np.zeros(ng, dtype=np.int64)
    g_month = np.zeros(ng, dtype=np.int64)
    g_ws[gk], g_store[gk], g_month[gk] = ws[m], store[m], month[m]
    keep = g_ws > 0
    ok2, n2 = _dense(g_store[keep], g_month[keep])
    num = np.bincount(ok2, weights=g_ws[keep] * sub_lr[keep], minlength=n2)
    den = np.bincount(ok2, weights=g_ws[keep], minlength=n2)
    out_store = np.zeros(n2, dtype=np.int64)
    out_month = np.zeros(n2, dtype=np.int64)
    out_store[ok2], out_month[ok2] = g_store[keep], g_month[keep]
    return pd.DataFrame({"store": out_store, "month": out_month, label: num / den})


def _store_chunk(cells: pd.DataFrame, weighting_year: str, outcomes) -> pd.DataFrame:
    f = _prepare(cells, weighting_year)
    order = np.lexsort((f["month"], f["product"], f["store"]))
    results = []
    if "price" in outcomes or "quantity" in outcomes:
        wp, ws = _row_weights(f, cells["retail_revenue"].to_numpy(dtype=float))
        if "price" in outcomes:
            results.append(_log_index(f, order, cells["retail_price"].to_numpy(dtype=float), wp, ws, "log_price_index"))
        if "quantity" in outcomes:
            q = cells["retail_quantity"].to_numpy(dtype=float)
            results.append(_log_index(f, order, np.where(q > 0, q, np.nan), wp, ws, "log_quantity_index"))
    if "cost" in outcomes:
        wp, ws = _row_weights(f, cells["wholesale_expenditure"].to_numpy(dtype=float))
        results.append(_log_index(f, order, cells["wholesale_price"].to_numpy(dtype=float), wp, ws, "log_cost_index"))
    out = results[0]
    for extra in results[1:]:
        out = out.merge(extra, on=["store", "month"], how="outer")
    ids = np.asarray(pd.factorize(cells["store_id"], sort=True)[1], dtype=object)
    out.insert(0, "store_id", ids[out["store"].to_numpy()])
    return out.drop(columns="store")


def build_store_indexes(
    cells: pd.DataFrame,
    weighting_year: str = "calendar",
    outcomes=("price", "quantity", "cost"),
    threads: int = 1,
) -> pd.DataFrame:
    """Log price / quantity / wholesale-cost index series for every store-month.

    Returns columns ``store_id, month`` plus ``log_<outcome>_index`` for each
    requested outcome; a missing value is a gap.  Stores are processed in
    independent chunks whose results are concatenated in store order, so the
    output does not depend on ``threads``.
    """
    stores = np.sort(cells["store_id"].unique())
    # chunking is fixed so the work split never depends on ``threads``
    chunks = [stores[i : i + STORES_PER_CHUNK] for i in range(0, len(stores), STORES_PER_CHUNK)]

    def run(chunk):
        part = cells[cells["store_id"].isin(chunk)]
        return _store_chunk(part, weighting_year, outcomes)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    columns = ["store_id", "month"] + [f"log_{o}_index" for o in ("price", "quantity", "cost") if o in outcomes]
    if not parts:
        return pd.DataFrame(columns=columns)
    out = pd.concat(parts, ignore_index=True)
    out = out.sort_values(["store_id", "month"], kind="stable").reset_index(drop=True)
    return out[columns]


def winsorize_series(values, lower: float = 0.005, upper: float = 0.995):
    """Clamp at nearest-rank empirical percentiles of the pooled non-missing values."""
    arr = np.asarray(values, dtype=float)
    finite = np.sort(arr[np.isfinite(arr)])
    n = finite.size
    if n == 0:
        return values
    lo = finite[max(math.ceil(lower * n), 1) - 1]
    hi = finite[max(math.ceil(upper * n), 1) - 1]
    out = np.where(np.isfinite(arr), np.clip(arr, lo, hi), arr)
    if isinstance(values, pd.Series):
        return pd.Series(out, index=values.index, name=values.name)
    return out
