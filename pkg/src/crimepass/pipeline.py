"""Glue between the stages: tables -> indexes -> stacked panels -> effect paths."""

from __future__ import annotations

import logging

import numpy as np
import pandas as pd

from .estimator import RegressionSpec, fit_distributed_lag, placebo_shift
from .indexes import build_store_indexes, winsorize_series
from .stacking import (
    Design,
    DesignConfig,
    StackedPanel,
    balanced_filter,
    build_design,
    build_sub_experiments,
    stack,
    wing_weights,
)

log = logging.getLogger(__name__)


def outcome_column(outcome: str) -> str:
    return f"log_{outcome}_index"


def index_series(
    cells: pd.DataFrame,
    outcomes=("price", "quantity", "cost"),
    weighting_year: str = "calendar",
    winsorize: tuple[float, float] | None = None,
    threads: int = 1,
) -> pd.DataFrame:
    """Store-month log index changes, optionally winsorized per outcome."""
    out = build_store_indexes(cells, weighting_year, outcomes, threads)
    if winsorize is not None:
        for o in outcomes:
            col = outcome_column(o)
            out[col] = winsorize_series(out[col], *winsorize)
    return out


def make_design(stores, crimes, dist, config: DesignConfig, placebo_offset: int | None = None) -> Design:
    if placebo_offset is not None:
        crimes = placebo_shift(crimes, placebo_offset)
    return build_design(stores, crimes, dist, config)


def sample_span(series: pd.DataFrame, column: str) -> tuple[int, int]:
    months = series.loc[np.isfinite(series[column].to_numpy(dtype=float)), "month"]
    return int(months.min()), int(months.max())


def stacked_panel(
    series: pd.DataFrame,
    design: Design,
    group: str,
    outcome: str = "price",
    balanced_share: float | None = None,
    wing: bool = False,
    subexperiments=None,
):
    """Build the stacked panel for one group and outcome.

    Returns the panel and the list of dropped sub-experiments.  Pass the
    output of :func:`build_sub_experiments` as ``subexperiments`` to reuse it
    across outcomes.
    """
    column = outcome_column(outcome)
    subs, dropped = subexperiments if subexperiments is not None else build_sub_experiments(design, group)
    panel = stack(subs, series, column, group, design.censor_months(group))
    panel.outcome = outcome
    if balanced_share is not None and len(panel):
        panel = balanced_filter(panel, *sample_span(series, column), min_share=balanced_share)
    if wing and len(panel):
        panel = panel.with_weights(wing_weights(panel))
    return panel, dropped


def effect_path(panel: StackedPanel, weighted: bool = False, controls: tuple = ()):
    return fit_distributed_lag(panel, RegressionSpec(k=panel.k, weighted=weighted, controls=tuple(controls)))


def simulate_and_estimate(
    dgp,
    design_config: DesignConfig | None = None,
    groups=("victimized", "rivals"),
    outcome: str = "price",
    placebo_offset: int | None = None,
    balanced_share: float | None = None,
    wing: bool = False,
    winsorize: tuple[float, float] | None = None,
) -> dict:
    """Draw one synthetic market and return ``{group: EffectPath}`` (in memory, no files)."""
    from .ingest import build_product_month_panel
    from .simulator import generate
    from .spatial import distance_matrix

    market = generate(dgp)
    cells = build_product_month_panel(market.transactions)
    series = index_series(cells, (outcome,), winsorize=winsorize)
    dist = distance_matrix(market.stores)
    design = make_design(market.stores, market.crimes, dist, design_config or DesignConfig(), placebo_offset)
    out = {}
    for group in groups:
        panel, _ = stacked_panel(series, design, group, outcome, balanced_share, wing)
        out[group] = effect_path(panel, weighted=wing)
    return out
