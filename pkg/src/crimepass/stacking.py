"""Treatment cohorts, clean controls and the stacked event panel.

Every crime incident defines a sub-experiment: the treated stores for that
incident (the victimized store, or the rivals whose first nearby incident it
is) plus the clean controls that pass three inclusion criteria:

* ring: the store lies in the control ring around the victimized store;
* own overlap: it is not a victimized store whose event window overlaps;
* rival overlap: it is not a rival of an incident whose event window overlaps.

Sub-experiments are concatenated into one stacked panel in which a store-month
may appear several times (once per sub-experiment it belongs to).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .errors import ConfigInvalid, NoCleanControls
from .spatial import DistanceMatrix, control_donut, rank_based_sets, rival_set

log = logging.getLogger(__name__)

GROUPS = ("victimized", "rivals")
BOUNDARIES = ("distance", "rank", "urban")
CONTAMINATION = ("main", "strict")


@dataclass(frozen=True)
class DesignConfig:
    k: int = 6
    rival_radius: float = 5.0
    inner: float = 30.0
    outer: float = 60.0
    boundary: str = "distance"
    rival_k: int = 20
    ctrl_lo: int = 150
    ctrl_hi: int = 250
    urban_inner: float = 10.0
    urban_outer: float = 30.0
    contamination: str = "main"
    multi_treatment: bool = False
    rival_single_treatment: bool = False
    single_intensity: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ConfigInvalid("design.k", "window half-width must be at least 1")
        if self.boundary not in BOUNDARIES:
            raise ConfigInvalid("design.boundary", f"expected one of {BOUNDARIES}")
        if self.contamination not in CONTAMINATION:
            raise ConfigInvalid("design.contamination", f"expected one of {CONTAMINATION}")
        if not 0 <= self.inner <= self.outer:
            raise ConfigInvalid("design.inner", "need 0 <= inner <= outer")
        if not 0 <= self.urban_inner <= self.urban_outer:
            raise ConfigInvalid("design.urban_inner", "need 0 <= urban_inner <= urban_outer")
        if self.rival_radius <= 0:
            raise ConfigInvalid("design.rival_radius", "must be positive")
        if not 0 < self.ctrl_lo <= self.ctrl_hi:
            raise ConfigInvalid("design.ctrl_lo", "need 0 < ctrl_lo <= ctrl_hi")

    def overlaps(self, a: int, b: int) -> bool:
        # two (2k+1)-month windows intersect iff their centres are at most 2k apart
        return abs(int(a) - int(b)) <= 2 * self.k


def lag_name(l: int) -> str:
    return f"lag{l:+d}"


def lag_range(k: int) -> list[int]:
    """Distributed-lag indices ``-k+1 .. k`` (2k coefficients)."""
    return list(range(-k + 1, k + 1))


def incident_table(crimes: pd.DataFrame) -> pd.DataFrame:
    """One incident per (store, month), in chronological order with store-id tie-break."""
    inc = crimes[["store_id", "month"]].drop_duplicates()
    inc = inc.sort_values(["month", "store_id"], kind="stable").reset_index(drop=True)
    inc.insert(0, "incident_id", [f"{s}@{m}" for s, m in zip(inc["store_id"], inc["month"])])
    return inc


@dataclass(frozen=True)
class VictimCohorts:
    events: pd.DataFrame
    censor: dict

    def event_months(self) -> dict:
        return {s: g["month"].tolist() for s, g in self.events.groupby("store_id", sort=True)}


def assign_victim_cohorts(crimes: pd.DataFrame, k: int = 6, multi_treatment: bool = False) -> VictimCohorts:
    """Treatment events for victimized stores.

    By default only a store's first incident is an event and the store is
    censored from the month of its second incident onward.  With
    ``multi_treatment`` every later incident whose window does not overlap the
    previously kept event becomes an extra event; overlapping ones are ignored.
    """
    inc = incident_table(crimes)
    keep, censor = [], {}
    for store, group in inc.groupby("store_id", sort=True):
        months = group["month"].tolist()
        ids = group["incident_id"].tolist()
        if not multi_treatment:
            keep.append(ids[0])
            if len(months) > 1:
                censor[store] = months[1]
            continue
        last = None
        for incident, m in zip(ids, months):
            if last is None or m - last > 2 * k:
                keep.append(incident)
                last = m
    events = inc[inc["incident_id"].isin(set(keep))].reset_index(drop=True)
    return VictimCohorts(events, censor)


def assign_rival_cohorts(incidents: pd.DataFrame, rival_sets: dict, single_treatment: bool = False) -> pd.DataFrame:
    """First-nearby-incident cohort for every rival store.

    ``incidents`` must be in chronological order.  ``multi_intensity`` flags
    rivals that ever had more than one nearby incident in the same month.  With
    ``single_treatment`` a rival is censored from the month before its next
    nearby incident in a later month (``censor_month``).
    """
    records = []
    for incident, store, month in incidents[["incident_id", "store_id", "month"]].itertuples(index=False):
        for r in rival_sets.get(store, ()):
            records.append((r, incident, store, month))
    columns = ["store_id", "incident_id", "victim_store", "cohort_month", "n_nearby", "multi_intensity", "censor_month"]
    if not records:
        return pd.DataFrame(columns=columns)
    near = pd.DataFrame(records, columns=["store_id", "incident_id", "victim_store", "month"])
    rows = []
    for r, g in near.groupby("store_id", sort=True):
        first = g.iloc[0]
        cohort = int(first["month"])
        later = g["month"][g["month"] > cohort]
        censor = int(later.iloc[0]) - 1 if single_treatment and len(later) else np.nan
        rows.append(
            (
                r,
                first["incident_id"],
                first["victim_store"],
                cohort,
                len(g),
                bool(g["month"].duplicated().any()),
                censor,
            )
        )
    out = pd.DataFrame(rows, columns=columns)
    out["cohort_month"] = out["cohort_month"].astype(np.int64)
    return out


@dataclass
class Design:
    """Everything needed to build sub-experiments for one specification."""

    config: DesignConfig
    incidents: pd.DataFrame
    victim: VictimCohorts
    victimized: frozenset
    rival_sets: dict
    candidate_sets: dict
    rival_cohorts: pd.DataFrame
    contamination: dict = field(default_factory=dict)

    def __post_init__(self):
        self._victim_months = self.victim.event_months()
        self._rival_month = dict(zip(self.rival_cohorts["store_id"], self.rival_cohorts["cohort_month"]))

    @property
    def all_rivals(self) -> frozenset:
        return frozenset(self.rival_cohorts["store_id"])

    def group_incidents(self, group: str) -> pd.DataFrame:
        if group == "victimized":
            return self.victim.events
        if group == "rivals":
            return self.incidents
        raise ValueError(f"group must be one of {GROUPS}")

    def censor_months(self, group: str) -> dict:
        censor = dict(self.victim.censor)
        if group == "rivals" and self.config.rival_single_treatment:
            rc = self.rival_cohorts.dropna(subset=["censor_month"])
            for s, m in zip(rc["store_id"], rc["censor_month"]):
                censor[s] = min(int(m), censor.get(s, int(m)))
        return censor

    def treated_rivals(self, incident_id: str) -> tuple:
        rc = self.rival_cohorts[self.rival_cohorts["incident_id"] == incident_id]
        if self.config.single_intensity:
            rc = rc[~rc["multi_intensity"].astype(bool)]
        return tuple(sorted(rc["store_id"]))

    def excluded_controls(self, event_month: int) -> set:
        """Stores failing the overlap rules (and the strict contamination rule) for an event month."""
        cfg = self.config
        # overlap means the two event windows intersect: |t_h - t_j| <= 2k
        out = {h for h, months in self._victim_months.items() if any(cfg.overlaps(m, event_month) for m in months)}
        out.update(h for h, m in self._rival_month.items() if cfg.overlaps(m, event_month))
        if cfg.contamination == "strict":
            out.update(h for h, months in self.contamination.items() if any(cfg.overlaps(m, event_month) for m in months))
        return out


def _boundary(config: DesignConfig, stores: pd.DataFrame, j) -> tuple[float, float]:
    if config.boundary == "urban":
        if "urban_flag" not in stores.columns:
            raise ConfigInvalid("design.boundary", "urban boundaries need an urban_flag column in stores")
        urban = bool(stores.set_index("store_id").at[j, "urban_flag"])
        if urban:
            return config.urban_inner, config.urban_outer
    return config.inner, config.outer


def build_design(stores: pd.DataFrame, crimes: pd.DataFrame, dist: DistanceMatrix, config: DesignConfig) -> Design:
    incidents = incident_table(crimes)
    victim = assign_victim_cohorts(crimes, config.k, config.multi_treatment)
    victimized = frozenset(incidents["store_id"])
    rivals, candidates = {}, {}
    for j in sorted(victimized):
        if config.boundary == "rank":
            ms = rank_based_sets(j, dist, config.rival_k, config.ctrl_lo, config.ctrl_hi)
            rivals[j] = tuple(s for s in ms.rivals if s not in victimized)
            candidates[j] = ms.candidates
        else:
            inner, outer = _boundary(config, stores, j)
            rivals[j] = rival_set(j, dist, victimized, config.rival_radius)
            candidates[j] = control_donut(j, dist, inner, outer)
    cohorts = assign_rival_cohorts(incidents, rivals, config.rival_single_treatment)

    contamination = {}
    if config.contamination == "strict":
        ids = np.asarray(dist.store_ids, dtype=object)
        for store, month in zip(incidents["store_id"], incidents["month"]):
            inner, _ = _boundary(config, stores, store)
            d = dist.row(store)
            for h in ids[(d < inner) & (ids != store)]:
                contamination.setdefault(h, []).append(int(month))
    return Design(config, incidents, victim, victimized, rivals, candidates, cohorts, contamination)


@dataclass(frozen=True)
class SubExperiment:
    incident_id: str
    victim: object
    event_month: int
    k: int
    treated: tuple
    controls: tuple

    @property
    def span(self) -> tuple[int, int]:
        return self.event_month - self.k, self.event_month + self.k


def build_sub_experiment(incident, design: Design, group: str = "victimized") -> SubExperiment:
    """Treated set and clean controls for one incident.

    ``incident`` is a row (mapping) with ``incident_id``, ``store_id`` and
    ``month``.  Raises :class:`NoCleanControls` if nothing survives the
    inclusion criteria.
    """
    j, t = incident["store_id"], int(incident["month"])
    if group == "victimized":
        treated = (j,)
    elif group == "rivals":
        treated = design.treated_rivals(incident["incident_id"])
    else:
        raise ValueError(f"group must be one of {GROUPS}")
    excluded = design.excluded_controls(t) | set(treated) | {j}
    controls = tuple(c for c in design.candidate_sets[j] if c not in excluded)
    if not controls:
        raise NoCleanControls(f"incident {incident['incident_id']} has no clean control stores")
    return SubExperiment(incident["incident_id"], j, t, design.config.k, treated, controls)


def build_sub_experiments(design: Design, group: str = "victimized"):
    """All sub-experiments for ``group`` plus a list of ``(incident_id, reason)`` drops."""
    out, dropped = [], []
    for row in design.group_incidents(group).to_dict("records"):
        try:
            sub = build_sub_experiment(row, design, group)
        except NoCleanControls as exc:
            log.warning("dropping sub-experiment: %s", exc)
            dropped.append((row["incident_id"], "no clean controls"))
            continue
        if not sub.treated:
            dropped.append((row["incident_id"], "no treated stores"))
            continue
        out.append(sub)
    return out, dropped


@dataclass
class StackedPanel:
    rows: pd.DataFrame
    experiments: pd.DataFrame
    k: int
    group: str = "victimized"
    outcome: str = "y"

    @property
    def lag_columns(self) -> list[str]:
        return [lag_name(l) for l in lag_range(self.k)]

    def __len__(self):
        return len(self.rows)

    def with_weights(self, weights) -> "StackedPanel":
        rows = self.rows.copy()
        rows["weight"] = np.asarray(weights, dtype=float)
        return replace(self, rows=rows)


def stack(
    subexperiments,
    outcome: pd.DataFrame,
    column: str,
    group: str = "victimized",
    censor: dict | None = None,
) -> StackedPanel:
    """Concatenate sub-experiments into the stacked panel.

    ``outcome`` has ``store_id, month, <column>``; store-months where the
    outcome is missing (index gaps) or that fall on or after the store's
    censor month are left out.
    """
    subexperiments = sorted(subexperiments, key=lambda s: (s.event_month, str(s.victim), s.incident_id))
    k = subexperiments[0].k if subexperiments else 6
    members, experiments = [], []
    for d, sub in enumerate(subexperiments):
        experiments.append((d, sub.incident_id, sub.victim, sub.event_month, len(sub.treated), len(sub.controls)))
        members.extend((d, sub.incident_id, s, sub.event_month, True) for s in sub.treated)
        members.extend((d, sub.incident_id, s, sub.event_month, False) for s in sub.controls)
    experiments = pd.DataFrame(
        experiments, columns=["d", "incident_id", "victim_store", "event_month", "n_treated", "n_controls"]
    )
    members = pd.DataFrame(members, columns=["d", "incident_id", "store_id", "event_month", "treated"])
    series = outcome[["store_id", "month", column]].rename(columns={column: "y"})
    series = series[np.isfinite(series["y"].to_numpy(dtype=float))]
    rows = members.merge(series, on="store_id", how="inner", sort=False)
    rel = rows["month"].to_numpy() - rows["event_month"].to_numpy()
    rows = rows[np.abs(rel) <= k]
    if censor:
        limit = rows["store_id"].map(censor).to_numpy(dtype=float)
        rows = rows[~(rows["month"].to_numpy() >= limit)]
    rows = rows.sort_values(["d", "store_id", "month"], kind="stable").reset_index(drop=True)
    rel = rows["month"].to_numpy() - rows["event_month"].to_numpy()
    treated = rows["treated"].to_numpy(dtype=bool)
    rows["rel"] = np.where(treated, rel, 0)
    for l in lag_range(k):
        rows[lag_name(l)] = (treated & (rel == l)).astype(float)
    rows["weight"] = 1.0
    return StackedPanel(rows, experiments, k, group, column)


def balanced_filter(panel: StackedPanel, sample_start: int, sample_end: int, min_share: float = 0.75) -> StackedPanel:
    """Keep sub-experiments whose whole window is inside the sample.

    Treated stores must also report at least ``min_share`` of the window
    months; sub-experiments left without treated stores are dropped.
    """
    k = panel.k
    exp = panel.experiments
    inside = (exp["event_month"] - k >= sample_start) & (exp["event_month"] + k <= sample_end)
    keep_d = set(exp.loc[inside, "d"])
    rows = panel.rows[panel.rows["d"].isin(keep_d)]
    treated = rows[rows["treated"]]
    counts = treated.groupby(["d", "store_id"]).size()
    enough = counts[counts >= min_share * (2 * k + 1)].index
    ok = set(enough)
    drop_treated = rows["treated"].to_numpy() & ~np.array([(d, s) in ok for d, s in zip(rows["d"], rows["store_id"])], dtype=bool)
    rows = rows[~drop_treated]
    alive = set(rows.loc[rows["treated"], "d"])
    rows = rows[rows["d"].isin(alive)].reset_index(drop=True)
    experiments = exp[exp["d"].isin(alive)].reset_index(drop=True)
    return replace(panel, rows=rows, experiments=experiments)


def wing_weights(panel: StackedPanel) -> pd.Series:
    """Sample weights balancing treated/control shares across sub-experiments.

    Treated rows get 1.  Control rows in sub-experiment ``d`` get
    ``(N_treated_d / N_control_d) * (N_control / N_treated)`` where the counts
    are distinct stores and the unsubscripted counts are pooled over all
    sub-experiments.
    """
    rows = panel.rows
    units = rows[["d", "store_id", "treated"]].drop_duplicates()
    n_t = units[units["treated"]].groupby("d").size()
    n_c = units[~units["treated"]].groupby("d").size()
    pooled = n_c.sum() / n_t.sum()
    ratio = (n_t / n_c).reindex(rows["d"]).to_numpy() * pooled
    w = np.where(rows["treated"].to_numpy(dtype=bool), 1.0, ratio)
    return pd.Series(w, index=rows.index, name="weight")


def build_twfe_panel(
    outcome: pd.DataFrame,
    column: str,
    design: Design,
    group: str = "victimized",
) -> pd.DataFrame:
    """Unstacked store-month panel for the canonical two-way fixed-effects baseline.

    Victim runs drop every rival store and rival runs drop every victimized
    store; censoring follows the same rules as the stacked design.
    """
    k = design.config.k
    series = outcome[["store_id", "month", column]].rename(columns={column: "y"})
    series = series[np.isfinite(series["y"].to_numpy(dtype=float))]
    if group == "victimized":
        series = series[~series["store_id"].isin(design.all_rivals)]
        events = design.victim.events[["store_id", "month"]].rename(columns={"month": "event_month"})
    elif group == "rivals":
        series = series[~series["store_id"].isin(design.victimized)]
        rc = design.rival_cohorts
        if design.config.single_intensity:
            flagged = set(rc.loc[rc["multi_intensity"].astype(bool), "store_id"])
            series = series[~series["store_id"].isin(flagged)]
            rc = rc[~rc["store_id"].isin(flagged)]
        events = rc[["store_id", "cohort_month"]].rename(columns={"cohort_month": "event_month"})
    else:
        raise ValueError(f"group must be one of {GROUPS}")
    censor = design.censor_months(group)
    if censor:
        limit = series["store_id"].map(censor).to_numpy(dtype=float)
        series = series[~(series["month"].to_numpy() >= limit)]
    rows = series.sort_values(["store_id", "month"], kind="stable").reset_index(drop=True)
    for l in lag_range(k):
        rows[lag_name(l)] = 0.0
    pairs = rows[["store_id", "month"]].reset_index().merge(events, on="store_id")
    rel = pairs["month"].to_numpy() - pairs["event_month"].to_numpy()
    for l in lag_range(k):
        hit = pairs.loc[rel == l, "index"].to_numpy()
        col = rows[lag_name(l)].to_numpy().copy()
        np.add.at(col, hit, 1.0)
        rows[lag_name(l)] = col
    rows["treated"] = rows["store_id"].isin(set(events["store_id"]))
    rows["weight"] = 1.0
    return rows
