"""Fixed-effects least squares for the distributed-lag event-study model.

The outcome (a month-over-month log index change) is regressed on the
treatment-adoption indicators ``lag-5 .. lag+6`` with sub-experiment by
calendar-month fixed effects.  The fixed effects are absorbed by demeaning
within cells, the remaining system is solved with a column-pivoted QR
factorization and standard errors are clustered by store (CR1).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
import scipy.linalg

from .errors import AllZeroRevenue, EmptyPanel, RankDeficient, SingleCluster
from .spatial import market_hhi
from .stacking import StackedPanel, lag_name, lag_range

log = logging.getLogger(__name__)

# relative tolerance on |R_ii| for the rank decision
RANK_TOL = 1e-10


def _codes(*keys) -> tuple[np.ndarray, int]:
    """Dense integer codes for the (possibly composite) key."""
    if len(keys) == 1:
        codes, uniques = pd.factorize(pd.Series(keys[0]), sort=True)
        return codes.astype(np.int64), len(uniques)
    frame = pd.DataFrame({f"k{i}": np.asarray(k) for i, k in enumerate(keys)})
    codes = frame.groupby(list(frame.columns), sort=True).ngroup().to_numpy()
    return codes.astype(np.int64), int(codes.max()) + 1 if codes.size else 0


def _group_mean(values: np.ndarray, codes: np.ndarray, n_groups: int, w: np.ndarray) -> np.ndarray:
    den = np.bincount(codes, weights=w, minlength=n_groups)
    out = np.empty((n_groups, values.shape[1]))
    for c in range(values.shape[1]):
        out[:, c] = np.bincount(codes, weights=w * values[:, c], minlength=n_groups)
    return out / den[:, None]


def absorb(values, fe, weights=None, tol: float = 1e-13, max_iter: int = 10_000) -> np.ndarray:
    """Sweep out one or more categorical fixed effects.

    A single key is removed exactly in one pass (weighted within-group
    demeaning).  Several keys are removed by alternating projections until the
    largest update falls below ``tol``.

    Parameters
    ----------
    values : array_like, shape (n,) or (n, p)
    fe : sequence of integer code arrays
    weights : array_like, optional
    """
    x = np.asarray(values, dtype=float)
    vector = x.ndim == 1
    x = x.reshape(len(x), -1).copy()
    w = np.ones(len(x)) if weights is None else np.asarray(weights, dtype=float)
    fe = [np.asarray(c, dtype=np.int64) for c in fe]
    sizes = [int(c.max()) + 1 if c.size else 0 for c in fe]
    if len(fe) == 1:
        x -= _group_mean(x, fe[0], sizes[0], w)[fe[0]]
    else:
        scale = max(float(np.abs(x).max(initial=0.0)), 1.0)
        for _ in range(max_iter):
            change = 0.0
            for codes, size in zip(fe, sizes):
                means = _group_mean(x, codes, size, w)
                x -= means[codes]
                change = max(change, float(np.abs(means).max(initial=0.0)))
            if change <= tol * scale:
                break
        else:
            log.warning("alternating projections did not converge in %d sweeps", max_iter)
    return x[:, 0] if vector else x


@dataclass(frozen=True)
class FitResult:
    names: list
    beta: np.ndarray
    vcov: np.ndarray
    resid: np.ndarray
    n: int
    clusters: int
    df_fe: int


def _normalized_weights(weights, n: int) -> np.ndarray | None:
    if weights is None:
        return None
    w = np.asarray(weights, dtype=float)
    if w.shape != (n,) or not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValueError("weights must be finite, non-negative and one per row")
    # dividing by the max makes equal weights exactly 1, so WLS == OLS bit for bit
    w = w / w.max()
    return None if np.all(w == 1.0) else w


def cluster_vcov(X, resid, clusters, bread=None, df_extra: int = 0) -> np.ndarray:
    """Cluster-robust sandwich covariance with the CR1 small-sample factor.

    ``X`` and ``resid`` are the (already demeaned and weight-scaled) design
    and residuals.  The factor is ``G/(G-1) * (N-1)/(N-K)`` with
    ``K = p + df_extra``.
    """
    X = np.asarray(X, dtype=float)
    u = np.asarray(resid, dtype=float)
    n, p = X.shape
    codes, G = _codes(np.asarray(clusters))
    if G < 2:
        raise SingleCluster(f"need at least 2 clusters, got {G}")
    if bread is None:
        bread = np.linalg.inv(X.T @ X)
    scores = X * u[:, None]
    S = np.empty((G, p))
    for c in range(p):
        S[:, c] = np.bincount(codes, weights=scores[:, c], minlength=G)
    meat = S.T @ S
    K = p + df_extra
    factor = G / (G - 1) * (n - 1) / (n - K)
    V = factor * bread @ meat @ bread
    return (V + V.T) / 2.0


def fit_fe_ols(y, X, names, fe, clusters, weights=None) -> FitResult:
    """OLS / WLS of ``y`` on ``X`` with absorbed fixed effects and clustered SEs.

    Raises
    ------
    RankDeficient
        If the demeaned design is rank deficient; the offending columns are
        named.
    SingleCluster
        Fewer than two clusters.
    """
    y = np.asarray(y, dtype=float)
    names = list(names)
    if len(y) == 0:
        raise EmptyPanel("no rows to estimate on")
    X = np.asarray(X, dtype=float).reshape(len(y), -1)
    n, p = X.shape
    w = _normalized_weights(weights, n)
    fe_codes, df_fe = [], 0
    for key in fe:
        codes, size = _codes(*key) if isinstance(key, tuple) else _codes(key)
        fe_codes.append(codes)
        df_fe += size
    df_fe -= max(len(fe_codes) - 1, 0)
    Z = absorb(np.column_stack([y, X]), fe_codes, w)
    yd, Xd = Z[:, 0], Z[:, 1:]
    if w is not None:
        s = np.sqrt(w)
        yd, Xd = yd * s, Xd * s[:, None]

    Q, R, piv = scipy.linalg.qr(Xd, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    scale = diag[0] if diag.size else 0.0
    rank = int(np.sum(diag > RANK_TOL * max(scale, 1e-300) * max(n, p))) if scale > 0 else 0
    if rank < p:
        raise RankDeficient(sorted((names[i] for i in piv[rank:]), key=names.index))
    z = scipy.linalg.solve_triangular(R, Q.T @ yd)
    beta = np.empty(p)
    beta[piv] = z
    resid = yd - Xd @ beta
    Rinv = scipy.linalg.solve_triangular(R, np.eye(p))
    bread_piv = Rinv @ Rinv.T
    bread = np.empty((p, p))
    bread[np.ix_(piv, piv)] = bread_piv
    V = cluster_vcov(Xd, resid, clusters, bread=bread, df_extra=df_fe)
    return FitResult(names, beta, V, resid, n, len(np.unique(np.asarray(clusters))), df_fe)


def cumulate(beta, V, k: int) -> pd.DataFrame:
    """Cumulative post effects ``E_L`` (L = 0..k) and pre-trend sums ``P_-L`` (L = 2..k).

    ``beta`` is ordered by lag ``-k+1 .. k``.  Standard errors are
    ``sqrt(a' V a)`` for the corresponding selection vector ``a``.
    """
    beta = np.asarray(beta, dtype=float)
    V = np.asarray(V, dtype=float)
    lags = lag_range(k)
    pos = {l: i for i, l in enumerate(lags)}
    rows = []
    for L in range(0, k + 1):
        a = np.zeros(len(lags))
        for l in range(0, L + 1):
            a[pos[l]] = 1.0
        rows.append(("E", L, float(a @ beta), float(np.sqrt(max(a @ V @ a, 0.0)))))
    for L in range(2, k + 1):
        a = np.zeros(len(lags))
        for l in range(-1, -L, -1):
            a[pos[l]] = -1.0
        rows.append(("P", -L, float(a @ beta), float(np.sqrt(max(a @ V @ a, 0.0)))))
    return pd.DataFrame(rows, columns=["kind", "L", "estimate", "se"])


@dataclass(frozen=True)
class RegressionSpec:
    k: int = 6
    weighted: bool = False
    controls: tuple = ()
    cluster: str = "store_id"

    @property
    def lag_columns(self) -> list[str]:
        return [lag_name(l) for l in lag_range(self.k)]


@dataclass(frozen=True)
class EffectPath:
    outcome: str
    group: str
    k: int
    beta: np.ndarray
    vcov: np.ndarray
    n: int
    clusters: int
    cumulative: pd.DataFrame = field(repr=False)

    @property
    def lags(self) -> list[int]:
        return lag_range(self.k)

    def effect(self, L: int) -> tuple[float, float]:
        """``(E_L, se)`` for a post period or ``(P_L, se)`` for negative ``L``."""
        row = self.cumulative[self.cumulative["L"] == L].iloc[0]
        return float(row["estimate"]), float(row["se"])

    def to_frame(self) -> pd.DataFrame:
        se = np.sqrt(np.clip(np.diag(self.vcov), 0.0, None))
        lags = pd.DataFrame({"kind": "beta", "L": self.lags, "estimate": self.beta, "se": se})
        out = pd.concat([lags, self.cumulative], ignore_index=True)
        out.insert(0, "group", self.group)
        out.insert(0, "outcome", self.outcome)
        out["n"] = self.n
        out["clusters"] = self.clusters
        return out


def _path(fit: FitResult, k: int, outcome: str, group: str) -> EffectPath:
    m = len(lag_range(k))
    beta, V = fit.beta[:m], fit.vcov[:m, :m]
    return EffectPath(outcome, group, k, beta, V, fit.n, fit.clusters, cumulate(beta, V, k))


def _columns(rows: pd.DataFrame, spec: RegressionSpec) -> list[str]:
    cols = spec.lag_columns + list(spec.controls)
    missing = [c for c in cols if c not in rows.columns]
    if missing:
        raise KeyError(f"panel is missing columns {missing}")
    return cols


def fit_distributed_lag(panel: StackedPanel, spec: RegressionSpec | None = None) -> EffectPath:
    """Stacked event-study regression with (sub-experiment, month) fixed effects."""
    spec = spec or RegressionSpec(k=panel.k)
    rows = panel.rows
    if rows.empty:
        raise EmptyPanel(f"stacked panel for {panel.group} / {panel.outcome} has no rows")
    cols = _columns(rows, spec)
    fit = fit_fe_ols(
        rows["y"].to_numpy(dtype=float),
        rows[cols].to_numpy(dtype=float),
        cols,
        [(rows["d"].to_numpy(), rows["month"].to_numpy())],
        rows[spec.cluster].to_numpy(),
        rows["weight"].to_numpy(dtype=float) if spec.weighted else None,
    )
    return _path(fit, spec.k, panel.outcome, panel.group)


def fit_twfe(rows: pd.DataFrame, spec: RegressionSpec | None = None, outcome: str = "y", group: str = "victimized") -> EffectPath:
    """Canonical two-way fixed-effects baseline on an unstacked store-month panel.

    Only calendar-month fixed effects are included, because the outcome is
    already a first difference.
    """
    spec = spec or RegressionSpec()
    if rows.empty:
        raise EmptyPanel("TWFE panel has no rows")
    cols = _columns(rows, spec)
    fit = fit_fe_ols(
        rows["y"].to_numpy(dtype=float),
        rows[cols].to_numpy(dtype=float),
        cols,
        [rows["month"].to_numpy()],
        rows[spec.cluster].to_numpy(),
        rows["weight"].to_numpy(dtype=float) if spec.weighted else None,
    )
    return _path(fit, spec.k, outcome, f"{group}_twfe")


def attach_covariates(panel: StackedPanel, covariates: pd.DataFrame) -> StackedPanel:
    """Merge numeric covariates keyed by ``store_id, month`` onto the panel rows.

    Rows without covariate values are dropped.
    """
    extra = [c for c in covariates.columns if c not in ("store_id", "month")]
    rows = panel.rows.drop(columns=[c for c in extra if c in panel.rows.columns])
    rows = rows.merge(covariates, on=["store_id", "month"], how="left", sort=False)
    rows = rows.dropna(subset=extra).reset_index(drop=True)
    return replace(panel, rows=rows)


# heterogeneity -----------------------------------------------------------------

SPLIT_RULES = ("chain", "hhi", "urban_hhi")


def chain_stores(stores: pd.DataFrame, min_size: int = 3) -> set:
    """Stores whose firm runs at least ``min_size`` stores."""
    size = stores.groupby("firm_id")["store_id"].transform("count")
    return set(stores.loc[size >= min_size, "store_id"])


def experiment_hhi(panel: StackedPanel, dist, revenue: pd.DataFrame, radius: float = 5.0, window: int = 12) -> pd.Series:
    """Pre-event market HHI of each sub-experiment's victimized store, indexed by ``d``.

    Markets without revenue in the pre-event window get NaN.
    """
    exp = panel.experiments
    values = []
    for j, t in zip(exp["victim_store"], exp["event_month"]):
        try:
            values.append(market_hhi(j, int(t), dist, revenue, radius, window))
        except AllZeroRevenue:
            values.append(np.nan)
    return pd.Series(values, index=exp["d"].to_numpy(), name="hhi")


def median_split(values: pd.Series, strata: pd.Series | None = None) -> pd.Series:
    """``True`` for the "high" half: values at or above the median (within each stratum).

    Missing values are left out (NaN in the result).
    """
    if strata is None:
        med = values.median()
    else:
        med = values.groupby(strata.reindex(values.index)).transform("median")
    return (values >= med).where(values.notna())


def _subset(panel: StackedPanel, keep_d=None, keep_treated=None) -> StackedPanel:
    rows = panel.rows
    if keep_d is not None:
        rows = rows[rows["d"].isin(set(keep_d))]
    if keep_treated is not None:
        drop = rows["treated"].to_numpy(dtype=bool) & ~rows["store_id"].isin(keep_treated).to_numpy()
        rows = rows[~drop]
    alive = set(rows.loc[rows["treated"].astype(bool), "d"])
    rows = rows[rows["d"].isin(alive)].reset_index(drop=True)
    experiments = panel.experiments[panel.experiments["d"].isin(alive)].reset_index(drop=True)
    out = replace(panel, rows=rows, experiments=experiments)
    if rows.empty:
        log.warning("heterogeneity split left an empty panel (%s)", panel.group)
    return out


def heterogeneity_split(
    panel: StackedPanel,
    rule: str,
    stores: pd.DataFrame,
    hhi: pd.Series | None = None,
) -> dict[str, StackedPanel]:
    """Partition a stacked panel into two subsamples.

    ``chain`` splits on whether the treated store belongs to a firm with three
    or more stores: whole sub-experiments for the victim specification,
    treated stores (keeping every control group) for the rival specification.
    ``hhi`` splits sub-experiments at the median pre-event HHI of the
    victimized store's market (``hhi`` indexed by ``d``); ties at the median
    go to ``high``.  ``urban_hhi`` takes medians separately among urban and
    rural victimized stores.
    """
    if rule == "chain":
        chains = chain_stores(stores)
        if panel.group == "victimized":
            exp = panel.experiments
            is_chain = exp["victim_store"].isin(chains)
            return {
                "chain": _subset(panel, keep_d=exp.loc[is_chain, "d"]),
                "independent": _subset(panel, keep_d=exp.loc[~is_chain, "d"]),
            }
        treated = set(panel.rows.loc[panel.rows["treated"].astype(bool), "store_id"])
        return {
            "chain": _subset(panel, keep_treated=treated & chains),
            "independent": _subset(panel, keep_treated=treated - chains),
        }
    if rule in ("hhi", "urban_hhi"):
        if hhi is None:
            raise ValueError("HHI split needs per-sub-experiment HHI values")
        strata = None
        if rule == "urban_hhi":
            flags = stores.set_index("store_id")["urban_flag"]
            victims = panel.experiments.set_index("d")["victim_store"]
            strata = victims.map(flags).astype(bool)
        high = median_split(hhi, strata)
        if high.isna().any():
            log.warning("%d sub-experiments without a defined HHI left out of the split", int(high.isna().sum()))
        return {
            "high": _subset(panel, keep_d=high.index[(high == True).to_numpy()]),  # noqa: E712
            "low": _subset(panel, keep_d=high.index[(high == False).to_numpy()]),  # noqa: E712
        }
    raise ValueError(f"rule must be one of {SPLIT_RULES}")


def placebo_shift(crimes: pd.DataFrame, offset: int = -12) -> pd.DataFrame:
    """Move every incident by ``offset`` months."""
    out = crimes.copy()
    out["month"] = out["month"] + int(offset)
    return out
