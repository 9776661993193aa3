"""Product-level wholesale cost pass-through with distance-binned rival costs.

Each row is a (store, product, month) observation.  The regressors are the
store's own wholesale cost change and, for every 5-mile distance bin around
the store, the unweighted mean cost change of the other stores in that bin
that bought the same product in both months.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .estimator import fit_fe_ols
from .ingest import PRODUCT_KEY
from .spatial import DistanceMatrix

VARIANTS = ("fd", "level", "log")


def bin_name(r: int) -> str:
    return f"bin{r}"


def _series(cells: pd.DataFrame, variant: str):
    """Own outcome / cost arrays on the (store, product, month) grid."""
    p = cells["retail_price"].to_numpy(dtype=float)
    w = cells["wholesale_price"].to_numpy(dtype=float)
    if variant == "log":
        with np.errstate(divide="ignore", invalid="ignore"):
            p = np.where(p > 0, np.log(p), np.nan)
            w = np.where(w > 0, np.log(w), np.nan)
    return p, w


def build_passthrough_panel(
    cells: pd.DataFrame,
    dist: DistanceMatrix,
    bins: int = 9,
    width: float = 5.0,
    variant: str = "fd",
    stores=None,
) -> pd.DataFrame:
    """Regression rows for the pass-through model.

    Parameters
    ----------
    cells : product-month panel (see :func:`crimepass.ingest.build_product_month_panel`)
    dist : store distance matrix
    bins : number of distance bins ``R``; bin ``r`` covers ``[(r-1)*width, r*width)``
    variant : ``"fd"`` (dollar first differences), ``"log"`` (log first
        differences) or ``"level"`` (dollar levels, estimated with store-product
        fixed effects)
    stores : optional subset of stores whose rows are kept (rivals are always
        drawn from every store)

    Returns
    -------
    DataFrame with ``store_id, product, month, y, own`` and ``bin1..binR``
    (NaN where no rival in the bin qualifies).  Rows whose own cost change is
    undefined are dropped.
    """
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    product = cells.groupby(PRODUCT_KEY, sort=True, observed=True, dropna=False).ngroup().to_numpy()
    store_pos = np.array([dist.index(s) for s in cells["store_id"]])
    month = cells["month"].to_numpy(dtype=np.int64)
    m0 = month.min() if month.size else 0
    T = int(month.max() - m0 + 1) if month.size else 0
    p, w = _series(cells, variant)

    rows = []
    names = [bin_name(r) for r in range(1, bins + 1)]
    order = np.lexsort((month, store_pos, product))
    bounds = np.flatnonzero(np.diff(product[order])) + 1
    for idx in np.split(order, bounds):
        if idx.size == 0:
            continue
        uniq, si = np.unique(store_pos[idx], return_inverse=True)
        ti = month[idx] - m0
        P = np.full((len(uniq), T), np.nan)
        W = np.full((len(uniq), T), np.nan)
        P[si, ti] = p[idx]
        W[si, ti] = w[idx]
        if variant == "level":
            Y, X = P, W
        else:
            Y = np.full_like(P, np.nan)
            X = np.full_like(W, np.nan)
            Y[:, 1:] = P[:, 1:] - P[:, :-1]
            X[:, 1:] = W[:, 1:] - W[:, :-1]
        has = np.isfinite(X)
        X0 = np.where(has, X, 0.0)
        D = dist.distances[np.ix_(uniq, uniq)]
        B = np.floor(D / width).astype(np.int64) + 1
        np.fill_diagonal(B, 0)
        avgs = []
        for r in range(1, bins + 1):
            A = (B == r).astype(float)
            num, den = A @ X0, A @ has.astype(float)
            with np.errstate(invalid="ignore", divide="ignore"):
                avgs.append(np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan))
        keep = has & np.isfinite(Y)
        rs, rt = np.nonzero(keep)
        block = {
            "store": uniq[rs],
            "product": np.full(rs.size, product[idx[0]], dtype=np.int64),
            "month": rt + m0,
            "y": Y[rs, rt],
            "own": X[rs, rt],
        }
        for name, a in zip(names, avgs):
            block[name] = a[rs, rt]
        rows.append(pd.DataFrame(block))
    columns = ["store_id", "product", "month", "y", "own", *names]
    if not rows:
        return pd.DataFrame(columns=columns)
    out = pd.concat(rows, ignore_index=True)
    ids = np.asarray(dist.store_ids, dtype=object)
    out.insert(0, "store_id", ids[out.pop("store").to_numpy()])
    if stores is not None:
        out = out[out["store_id"].isin(set(stores))]
    out = out.sort_values(["store_id", "product", "month"], kind="stable").reset_index(drop=True)
    return out[columns]


@dataclass(frozen=True)
class PassthroughEstimate:
    variant: str
    rho: float
    rho_se: float
    beta: np.ndarray
    vcov: np.ndarray
    n: int
    clusters: int
    cumulative: pd.DataFrame

    @property
    def bins(self) -> int:
        return len(self.beta)

    @property
    def beta_se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.vcov)[1:], 0.0, None))

    def to_frame(self, specification: str | None = None) -> pd.DataFrame:
        spec = specification or f"{self.variant}_R{self.bins}"
        rows = [(spec, "own", self.rho, self.rho_se, self.n)]
        rows += [(spec, bin_name(r + 1), b, s, self.n) for r, (b, s) in enumerate(zip(self.beta, self.beta_se))]
        rows += [
            (spec, f"cum{int(R)}", e, s, self.n)
            for R, e, s in self.cumulative[["R", "estimate", "se"]].itertuples(index=False)
        ]
        return pd.DataFrame(rows, columns=["specification", "coefficient", "estimate", "se", "n"])


def cumulative_bin_sums(beta, V) -> pd.DataFrame:
    """Prefix sums ``sum_{r<=R} beta_r`` with linear-combination standard errors."""
    beta = np.asarray(beta, dtype=float)
    V = np.asarray(V, dtype=float).reshape(beta.size, beta.size)
    rows = []
    for R in range(1, beta.size + 1):
        a = np.zeros(beta.size)
        a[:R] = 1.0
        rows.append((R, float(a @ beta), float(np.sqrt(max(a @ V @ a, 0.0)))))
    return pd.DataFrame(rows, columns=["R", "estimate", "se"])


def estimate_passthrough(
    panel: pd.DataFrame,
    bins: int | None = None,
    variant: str = "fd",
    controls: tuple = (),
    region: dict | None = None,
) -> PassthroughEstimate:
    """OLS of the price change on own and rival-bin cost changes with month fixed effects.

    ``bins`` selects the first ``R`` bin columns (``0`` for own cost only;
    default all).  Rows missing any included bin are dropped.  ``level``
    panels also absorb store-product effects.  ``region`` (store -> region)
    replaces month effects by region-by-month effects.  Standard errors are
    clustered by store.
    """
    all_bins = [c for c in panel.columns if c.startswith("bin")]
    R = len(all_bins) if bins is None else int(bins)
    cols = ["own", *[bin_name(r) for r in range(1, R + 1)], *controls]
    rows = panel.dropna(subset=cols + ["y"])
    month = rows["month"].to_numpy()
    if region is not None:
        time_fe = (rows["store_id"].map(region).to_numpy(), month)
    else:
        time_fe = month
    fe = [time_fe]
    if variant == "level":
        fe.append((rows["store_id"].to_numpy(), rows["product"].to_numpy()))
    fit = fit_fe_ols(
        rows["y"].to_numpy(dtype=float),
        rows[cols].to_numpy(dtype=float),
        cols,
        fe,
        rows["store_id"].to_numpy(),
    )
    m = 1 + R
    V = fit.vcov[:m, :m]
    beta = fit.beta[1:m]
    return PassthroughEstimate(
        variant,
        float(fit.beta[0]),
        float(np.sqrt(V[0, 0])),
        beta,
        V,
        fit.n,
        fit.clusters,
        cumulative_bin_sums(beta, V[1:, 1:]),
    )
