"""Great-circle distances, rival / control store sets and market concentration."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import AllZeroRevenue, UniverseTooSmall

# mean Earth radius (IUGG) in statute miles
EARTH_RADIUS_MILES = 3958.7613


def geodesic_distance(a, b) -> float:
    """Haversine distance in miles between two ``(lat, lon)`` pairs in degrees."""
    return float(_haversine(np.asarray(a[0]), np.asarray(a[1]), np.asarray(b[0]), np.asarray(b[1])))


def _haversine(lat1, lon1, lat2, lon2):
    phi1, phi2 = np.radians(lat1), np.radians(lat2)
    dphi = phi2 - phi1
    dlmb = np.radians(lon2) - np.radians(lon1)
    h = np.sin(dphi / 2.0) ** 2 + np.cos(phi1) * np.cos(phi2) * np.sin(dlmb / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_MILES * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


@dataclass(frozen=True)
class DistanceMatrix:
    store_ids: tuple
    distances: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "_pos", {s: i for i, s in enumerate(self.store_ids)})

    def index(self, store_id) -> int:
        return self._pos[store_id]

    def row(self, store_id) -> np.ndarray:
        return self.distances[self._pos[store_id]]

    def between(self, a, b) -> float:
        return float(self.distances[self._pos[a], self._pos[b]])

    def __len__(self):
        return len(self.store_ids)


def distance_matrix(stores: pd.DataFrame, threads: int = 1, block: int = 128) -> DistanceMatrix:
    """Pairwise haversine distances, filled by row blocks and mirrored.

    Only the upper triangle is evaluated, so the matrix is exactly symmetric
    and the result is independent of ``threads``.
    """
    stores = stores.sort_values("store_id", kind="stable")
    lat = stores["latitude"].to_numpy(dtype=float)
    lon = stores["longitude"].to_numpy(dtype=float)
    n = len(lat)
    out = np.zeros((n, n))

    def fill(start):
        stop = min(start + block, n)
        for i in range(start, stop):
            out[i, i + 1 :] = _haversine(lat[i], lon[i], lat[i + 1 :], lon[i + 1 :])

    starts = range(0, n, block)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(fill, starts))
    else:
        for s in starts:
            fill(s)
    upper = np.triu(out, 1)
    out = upper + upper.T
    return DistanceMatrix(tuple(stores["store_id"]), out)


@dataclass(frozen=True)
class MarketSets:
    victim: object
    rivals: tuple
    candidates: tuple


def _others(dist: DistanceMatrix, j):
    d = dist.row(j)
    ids = np.asarray(dist.store_ids, dtype=object)
    keep = np.arange(len(ids)) != dist.index(j)
    return ids[keep], d[keep]


def rival_set(j, dist: DistanceMatrix, victimized=(), radius: float = 5.0) -> tuple:
    """Stores strictly closer than ``radius`` to ``j``, minus every victimized store."""
    ids, d = _others(dist, j)
    victimized = set(victimized)
    return tuple(sorted(s for s, x in zip(ids, d) if x < radius and s not in victimized))


def control_donut(j, dist: DistanceMatrix, inner: float = 30.0, outer: float = 60.0) -> tuple:
    """Stores with ``inner <= d <= outer`` from ``j`` (both bounds closed)."""
    ids, d = _others(dist, j)
    return tuple(sorted(s for s, x in zip(ids, d) if inner <= x <= outer))


def rank_order(j, dist: DistanceMatrix) -> list:
    """Other stores sorted by distance from ``j``, ties broken by store id."""
    ids, d = _others(dist, j)
    return [s for _, s in sorted(zip(d.tolist(), ids.tolist()))]


def rank_based_sets(j, dist: DistanceMatrix, rival_k: int = 20, ctrl_lo: int = 150, ctrl_hi: int = 250) -> MarketSets:
    """Rivals are the ``rival_k`` nearest stores; candidates hold ranks ``ctrl_lo..ctrl_hi``.

    Ranks are 1-based over the other stores.
    """
    order = rank_order(j, dist)
    if len(order) < ctrl_hi:
        raise UniverseTooSmall(f"{len(order)} other stores, need at least {ctrl_hi} for rank-based sets")
    return MarketSets(j, tuple(sorted(order[:rival_k])), tuple(sorted(order[ctrl_lo - 1 : ctrl_hi])))


def hhi(market_revenues) -> float:
    """Herfindahl-Hirschman index from store revenues (shares squared and summed)."""
    r = np.asarray(market_revenues, dtype=float)
    total = r.sum()
    if r.size == 0 or total <= 0:
        raise AllZeroRevenue("market has no positive revenue")
    shares = r / total
    return float(np.sum(shares * shares))


def monthly_store_revenue(cells: pd.DataFrame) -> pd.DataFrame:
    return (
        cells.groupby(["store_id", "month"], sort=True, observed=True)["retail_revenue"].sum().reset_index()
    )


def market_hhi(j, month: int, dist: DistanceMatrix, revenue: pd.DataFrame, radius: float = 5.0, window: int = 12) -> float:
    """HHI of the focal store plus every store within ``radius`` miles.

    Shares use revenue over the ``window`` months before ``month``.
    """
    d = dist.row(j)
    members = {s for s, x in zip(dist.store_ids, d) if x < radius}
    members.add(j)
    pre = revenue[(revenue["month"] >= month - window) & (revenue["month"] < month)]
    per_store = pre[pre["store_id"].isin(members)].groupby("store_id")["retail_revenue"].sum()
    return hhi(per_store.reindex(sorted(members), fill_value=0.0).to_numpy())


def market_sets_frame(sets, label: str = "incident_id") -> pd.DataFrame:
    """Flatten ``{incident: MarketSets}`` into (incident, store, role) rows for export."""
    rows = []
    for incident, ms in sets.items():
        rows.extend((incident, s, "rival") for s in ms.rivals)
        rows.extend((incident, s, "control_candidate") for s in ms.candidates)
    return pd.DataFrame(rows, columns=[label, "store_id", "role"])
