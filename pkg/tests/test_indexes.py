from __future__ import annotations

import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crimepass.errors import NonPositivePrice
from crimepass.indexes import (
    build_store_indexes,
    compute_weights,
    store_index,
    subcategory_relative,
    weight_year,
    winsorize_series,
)
from crimepass.ingest import PRODUCT_KEY, build_product_month_panel, month_index

from oracles import cells_from, two_product_fixture

M1 = month_index(2018, 3)


def test_weight_shares():
    cells = cells_from(
        [("s", "flower", "1.0", "a", M1, 30.0, 10.0, 1.0), ("s", "flower", "1.0", "b", M1, 10.0, 10.0, 1.0)]
    )
    w = compute_weights(cells)
    assert w.product["weight"].tolist() == [0.75, 0.25]
    assert w.subcategory["weight"].tolist() == [1.0]


def test_weight_year_fiscal():
    assert weight_year(month_index(2018, 6), "fiscal-July") == 2017
    assert weight_year(month_index(2018, 7), "fiscal-July") == 2018
    assert weight_year(month_index(2018, 12), "calendar") == 2018


def test_two_product_hand_fixture():
    cells, expected = two_product_fixture(M1)
    out = build_store_indexes(cells)
    row = out[out["month"] == M1 + 1].iloc[0]
    assert abs(row["log_price_index"] - expected) < 1e-12
    assert row["log_quantity_index"] == 0.0
    assert abs(row["log_cost_index"] - math.log(1.05)) < 1e-12
    assert (out["month"] == M1).sum() == 0  # first month has nothing to match


def test_reference_relatives():
    assert subcategory_relative({"a": 1.1, "b": 0.9}, {"a": 1.0, "b": 1.0}, {"a": 0.5, "b": 0.5}) == pytest.approx(
        math.sqrt(0.99), abs=1e-15
    )
    assert subcategory_relative({"a": 2.0, "b": 3.0}, {"a": 2.0, "b": 3.0}, {"a": 0.3, "b": 0.7}) == 1.0
    # b only observed now: matched-model exclusion
    assert subcategory_relative({"a": 1.2, "b": 5.0}, {"a": 1.0}, {"a": 0.4, "b": 0.6}) == pytest.approx(1.2)
    assert subcategory_relative({"b": 5.0}, {"a": 1.0}, {"a": 1.0, "b": 1.0}) is None
    index, pi = store_index({"x": 1.02, "y": 0.98}, {"x": 0.6, "y": 0.4})
    assert pi == pytest.approx(0.6 * math.log(1.02) + 0.4 * math.log(0.98), abs=1e-15)
    assert index == pytest.approx(1.02**0.6 * 0.98**0.4, abs=1e-15)
    assert store_index({"x": 1.07}, {"x": 0.2})[0] == pytest.approx(1.07)
    with pytest.raises(NonPositivePrice):
        subcategory_relative({"a": 0.0}, {"a": 1.0}, {"a": 1.0})


def reference_series(cells: pd.DataFrame, value: str, basis: str) -> pd.Series:
    """Loop evaluation with the scalar helpers and groupby shares."""
    c = cells.copy()
    c["year"] = c["month"] // 12
    c["sub"] = list(zip(c["product_category"], c["unit_weight"]))
    c["prod"] = list(zip(c["product_producer"], c["product_category"], c["product_name"], c["unit_weight"]))
    p_tot = c.groupby(["store_id", "year", "prod"])[basis].transform("sum")
    s_tot = c.groupby(["store_id", "year", "sub"])[basis].transform("sum")
    y_tot = c.groupby(["store_id", "year"])[basis].transform("sum")
    c["wp"] = np.where(s_tot > 0, p_tot / s_tot.where(s_tot > 0, 1), 0.0)
    c["ws"] = np.where(y_tot > 0, s_tot / y_tot.where(y_tot > 0, 1), 0.0)
    out = {}
    for (store, month), g in c.groupby(["store_id", "month"]):
        prev = c[(c["store_id"] == store) & (c["month"] == month - 1)]
        prev_v = {r.prod: getattr(r, value) for r in prev.itertuples() if np.isfinite(getattr(r, value))}
        rels, sw = {}, {}
        for sub, gs in g.groupby("sub"):
            cur = {r.prod: getattr(r, value) for r in gs.itertuples() if np.isfinite(getattr(r, value))}
            rels[sub] = subcategory_relative(cur, prev_v, dict(zip(gs["prod"], gs["wp"])))
            sw[sub] = gs["ws"].iloc[0]
        res = store_index(rels, sw)
        if res is not None:
            out[(store, month)] = res[1]
    return pd.Series(out)


def test_matches_scalar_reference(small_market):
    cells = build_product_month_panel(small_market.transactions)
    keep = sorted(cells["store_id"].unique())[:4]
    cells = cells[cells["store_id"].isin(keep)].reset_index(drop=True)
    fast = build_store_indexes(cells).set_index(["store_id", "month"])
    for value, basis, col in (
        ("retail_price", "retail_revenue", "log_price_index"),
        ("wholesale_price", "wholesale_expenditure", "log_cost_index"),
    ):
        ref = reference_series(cells, value, basis)
        got = fast[col].dropna()
        assert set(got.index) == set(ref.index)
        diff = np.abs(got.reindex(ref.index).to_numpy() - ref.to_numpy())
        assert diff.max() < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.2, 5.0))
def test_fixed_weight_homogeneity(seed, c):
    rng = np.random.default_rng(seed)
    rows = []
    for name, cat in (("a", "flower"), ("b", "flower"), ("c", "vape"), ("d", "vape")):
        for t in range(4):
            rows.append(("s", cat, "1.0", name, M1 + t, float(rng.uniform(5, 50)), float(rng.integers(1, 30)), 1.0))
    base = cells_from(rows)
    scaled = base.copy()
    hit = scaled["month"] == M1 + 2
    # price x c with quantity / c keeps every revenue weight fixed
    scaled.loc[hit, "retail_price"] *= c
    scaled.loc[hit, "retail_quantity"] /= c
    a = build_store_indexes(base, outcomes=("price",)).set_index("month")["log_price_index"]
    b = build_store_indexes(scaled, outcomes=("price",)).set_index("month")["log_price_index"]
    assert abs((b[M1 + 2] - a[M1 + 2]) - math.log(c)) < 1e-12
    assert abs((b[M1 + 3] - a[M1 + 3]) + math.log(c)) < 1e-12
    assert abs(b[M1 + 1] - a[M1 + 1]) < 1e-12


def test_unchanged_prices_exact_zero(small_market):
    cells = build_product_month_panel(small_market.transactions)
    first = cells.groupby(["store_id", *PRODUCT_KEY], observed=True)["retail_price"].transform("first")
    cells["retail_price"] = first.to_numpy()
    out = build_store_indexes(cells, outcomes=("price",))
    assert len(out) > 0
    assert (out["log_price_index"] == 0.0).all()


def test_relabel_invariance(small_market):
    cells = build_product_month_panel(small_market.transactions)
    cells = cells[cells["store_id"].isin(sorted(cells["store_id"].unique())[:10])]
    relabel = cells.copy()
    relabel["store_id"] = "z" + relabel["store_id"]
    relabel["product_name"] = relabel["product_name"].astype(str) + "_x"
    a = build_store_indexes(cells)
    b = build_store_indexes(relabel)
    b["store_id"] = b["store_id"].str[1:]
    pd.testing.assert_frame_equal(a, b)


def test_threads_do_not_change_output(small_market):
    cells = build_product_month_panel(small_market.transactions)
    a = build_store_indexes(cells, threads=1)
    b = build_store_indexes(cells, threads=4)
    pd.testing.assert_frame_equal(a, b, check_exact=True)


def test_gap_month_is_missing():
    rows = [("s", "flower", "1.0", "a", M1 + t, 10.0 + t, 5.0, 1.0) for t in (0, 1, 3, 4)]
    out = build_store_indexes(cells_from(rows), outcomes=("price",))
    assert out["month"].tolist() == [M1 + 1, M1 + 4]


def test_winsorize():
    values = np.arange(1.0, 1000.0)
    values = np.append(values, 1e6)
    out = winsorize_series(values)
    assert out[-1] == 995.0
    assert out[0] == 5.0
    same = np.full(20, 3.0)
    assert np.array_equal(winsorize_series(same), same)
    assert np.array_equal(winsorize_series(values, 0.0, 1.0), values)
    with_nan = pd.Series([1.0, np.nan, 2.0])
    assert winsorize_series(with_nan).isna().tolist() == [False, True, False]
