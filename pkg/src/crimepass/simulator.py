"""Seeded synthetic retail market with known treatment effects.

Stores sit in clustered towns (or a uniform box) inside a Washington-sized
latitude/longitude rectangle.  Each store carries a random subset of a product
catalog.  Log retail prices are the sum of a product base level, a store
inflation process (AR(1) monthly changes), an aggregate shock, a seasonal
cycle, product noise and the injected effect paths.  Dollar prices also pass
through wholesale cost deviations.  Crimes arrive as independent Bernoulli
draws per store-month.

Every store draws from its own random streams (keyed by its position), so
adding stores never changes the draws of existing ones.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import ConfigInvalid
from .ingest import PRODUCT_KEY, month_label, parse_month
from .spatial import EARTH_RADIUS_MILES, distance_matrix

LAYOUTS = ("towns", "uniform")
# Washington-state sized box
LAT_RANGE = (45.6, 49.0)
LON_RANGE = (-124.5, -117.0)
CATEGORIES = {
    "flower": (1.0, 3.5, 7.0),
    "preroll": (0.5, 1.0),
    "edible": (0.1,),
    "vape": (0.5, 1.0),
    "concentrate": (0.5, 1.0),
    "topical": (0.0,),
}

# global stream ids
_S_TOWNS, _S_CATALOG, _S_AGGREGATE, _S_COST = range(4)
# per-store stream ids
_S_PLACE, _S_PRODUCTS, _S_PRICES, _S_CRIME, _S_WHOLESALE = range(5)


@dataclass(frozen=True)
class DgpConfig:
    n_stores: int = 500
    layout: str = "towns"
    n_towns: int = 30
    town_sd_miles: float = 4.0
    urban_towns: int = 6
    chain_share: float = 0.35
    n_chains: int = 12
    months: int = 46
    start: str = "2017-01"
    catalog_size: int = 300
    products_mean: float = 60.0
    presence: float = 0.9
    gap_prob: float = 0.01
    base_log_price: float = 3.5
    ar_coef: float = 0.3
    sigma: float = 0.01
    product_sigma: float = 0.01
    aggregate_sigma: float = 0.003
    seasonal_amplitude: float = 0.01
    hazard: float = 0.003
    q4_multiplier: float = 1.0
    victim_path: tuple = ()
    rival_path: tuple = ()
    effect_radius: float = 5.0
    wholesale_share: float = 0.4
    wholesale_sigma: float = 0.05
    wholesale_common_sigma: float = 0.02
    passthrough: float = 1.67
    rival_response: float = 0.0
    purchase_prob: float = 0.85
    quantity_mean: float = 20.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "victim_path", tuple(float(x) for x in self.victim_path))
        object.__setattr__(self, "rival_path", tuple(float(x) for x in self.rival_path))
        for name in ("sigma", "product_sigma", "aggregate_sigma", "wholesale_sigma", "wholesale_common_sigma", "town_sd_miles"):
            if not getattr(self, name) >= 0:
                raise ConfigInvalid(f"simulate.{name}", "must be >= 0")
        for name in ("presence", "gap_prob", "hazard", "purchase_prob", "chain_share"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigInvalid(f"simulate.{name}", "must lie in [0, 1]")
        for name in ("victim_path", "rival_path"):
            if not all(math.isfinite(x) for x in getattr(self, name)):
                raise ConfigInvalid(f"simulate.{name}", "effect path must be finite")
        if self.layout not in LAYOUTS:
            raise ConfigInvalid("simulate.layout", f"expected one of {LAYOUTS}")
        if self.n_stores < 1:
            raise ConfigInvalid("simulate.n_stores", "need at least one store")
        if self.months < 2:
            raise ConfigInvalid("simulate.months", "need at least two months")
        if self.catalog_size < 1 or self.products_mean <= 0:
            raise ConfigInvalid("simulate.catalog_size", "catalog and assortment must be non-empty")
        if not -1 < self.ar_coef < 1:
            raise ConfigInvalid("simulate.ar_coef", "AR(1) coefficient must lie in (-1, 1)")
        if self.q4_multiplier < 0 or self.hazard * max(self.q4_multiplier, 1.0) > 1:
            raise ConfigInvalid("simulate.q4_multiplier", "elevated hazard must stay a probability")
        if self.effect_radius < 0:
            raise ConfigInvalid("simulate.effect_radius", "must be >= 0")
        try:
            parse_month(self.start)
        except ValueError as exc:
            raise ConfigInvalid("simulate.start", str(exc)) from None

    @classmethod
    def from_mapping(cls, data: dict) -> "DgpConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigInvalid(f"simulate.{unknown[0]}", "unknown field")
        return cls(**data)

    @property
    def first_month(self) -> int:
        return parse_month(self.start)

    @property
    def month_range(self) -> np.ndarray:
        return np.arange(self.first_month, self.first_month + self.months)


@dataclass(frozen=True)
class GroundTruth:
    config: DgpConfig
    incidents: pd.DataFrame
    victim_effects: pd.DataFrame
    rival_effects: pd.DataFrame
    oracle: pd.DataFrame = field(repr=False)


@dataclass(frozen=True)
class SyntheticMarket:
    stores: pd.DataFrame
    transactions: pd.DataFrame
    crimes: pd.DataFrame
    truth: GroundTruth


def oracle_path(config: DgpConfig, k: int = 6) -> pd.DataFrame:
    """True cumulative effects ``E_L`` (L = 0..k) and pre-trends ``P_-L`` (all zero) per group."""
    rows = []
    for group, path in (("victimized", config.victim_path), ("rivals", config.rival_path)):
        lam = np.zeros(k + 1)
        m = min(len(path), k + 1)
        lam[:m] = path[:m]
        cum = np.cumsum(lam)
        rows.extend((group, "E", L, float(cum[L])) for L in range(k + 1))
        rows.extend((group, "P", -L, 0.0) for L in range(2, k + 1))
    return pd.DataFrame(rows, columns=["group", "kind", "L", "truth"])


def _effect(path: tuple, months: np.ndarray, event: float) -> np.ndarray:
    """Cumulative log effect at ``months`` of a path that starts at ``event``."""
    if not path or not np.isfinite(event):
        return np.zeros(len(months))
    cum = np.cumsum(np.asarray(path, dtype=float))
    rel = months - int(event)
    out = np.zeros(len(months))
    post = rel >= 0
    out[post] = cum[np.minimum(rel[post], len(cum) - 1)]
    return out


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def _global(config: DgpConfig, stream: int) -> np.random.Generator:
    return _rng(config.seed, 0, stream)


def _store_rng(config: DgpConfig, store: int, stream: int) -> np.random.Generator:
    return _rng(config.seed, 1, store, stream)


def _catalog(config: DgpConfig) -> pd.DataFrame:
    rng = _global(config, _S_CATALOG)
    cats = list(CATEGORIES)
    n = config.catalog_size
    cat = rng.integers(0, len(cats), n)
    rows = []
    for i in range(n):
        c = cats[cat[i]]
        weights = CATEGORIES[c]
        uw = weights[rng.integers(0, len(weights))]
        producer = f"P{rng.integers(0, max(n // 8, 1)):03d}"
        level = config.base_log_price + 0.5 * math.log(max(uw, 0.1)) + rng.normal(0.0, 0.2)
        popularity = rng.gamma(2.0, 1.0)
        rows.append((producer, c, f"{c}-{i:04d}", uw, level, popularity))
    return pd.DataFrame(
        rows, columns=["product_producer", "product_category", "product_name", "unit_weight", "log_level", "popularity"]
    )


def _miles_to_degrees(miles, lat):
    dlat = np.degrees(miles / EARTH_RADIUS_MILES)
    dlon = dlat / np.cos(np.radians(lat))
    return dlat, dlon


def generate_stores(config: DgpConfig) -> pd.DataFrame:
    rng = _global(config, _S_TOWNS)
    n_towns = max(config.n_towns, 1)
    town_lat = rng.uniform(LAT_RANGE[0] + 0.3, LAT_RANGE[1] - 0.3, n_towns)
    town_lon = rng.uniform(LON_RANGE[0] + 0.4, LON_RANGE[1] - 0.4, n_towns)
    size = 1.0 / np.arange(1, n_towns + 1) ** 0.8
    size /= size.sum()
    rows = []
    width = len(str(config.n_stores - 1))
    for j in range(config.n_stores):
        r = _store_rng(config, j, _S_PLACE)
        if config.layout == "towns":
            t = int(r.choice(n_towns, p=size))
            offset = r.normal(0.0, config.town_sd_miles, 2)
            dlat, dlon = _miles_to_degrees(offset, town_lat[t])
            lat = float(np.clip(town_lat[t] + dlat[0], *LAT_RANGE))
            lon = float(np.clip(town_lon[t] + dlon[1], *LON_RANGE))
            urban = t < config.urban_towns
        else:
            lat, lon = float(r.uniform(*LAT_RANGE)), float(r.uniform(*LON_RANGE))
            urban = False
        chain = r.uniform() < config.chain_share and config.n_chains > 0
        firm = f"C{int(r.integers(0, max(config.n_chains, 1))):02d}" if chain else f"F{j:0{width}d}"
        rows.append((f"S{j:0{width}d}", round(lat, 6), round(lon, 6), firm, urban))
    return pd.DataFrame(rows, columns=["store_id", "latitude", "longitude", "firm_id", "urban_flag"])


def generate_crimes(config: DgpConfig, stores: pd.DataFrame | None = None) -> pd.DataFrame:
    stores = generate_stores(config) if stores is None else stores
    months = config.month_range
    q4 = (months % 12) >= 9
    hazard = np.where(q4, config.hazard * config.q4_multiplier, config.hazard)
    rows = []
    for j, store in enumerate(stores["store_id"]):
        r = _store_rng(config, j, _S_CRIME)
        hit = r.uniform(size=len(months)) < hazard
        kinds = r.uniform(size=len(months)) < 0.5
        rows.extend((store, int(m), "robbery" if k else "burglary") for m, k in zip(months[hit], kinds[hit]))
    crimes = pd.DataFrame(rows, columns=["store_id", "month", "kind"])
    return crimes.sort_values(["month", "store_id"], kind="stable").reset_index(drop=True)


def _event_months(config: DgpConfig, stores: pd.DataFrame, crimes: pd.DataFrame):
    """First-crime month of victims and first-nearby-incident month of rivals."""
    ids = stores["store_id"].to_numpy()
    victim = crimes.groupby("store_id")["month"].min()
    victim_month = pd.Series(ids).map(victim).to_numpy(dtype=float)
    rival_month = np.full(len(ids), np.nan)
    if len(crimes) and config.rival_path:
        dist = distance_matrix(stores)
        pos = np.array([dist.index(s) for s in ids])
        d = dist.distances[np.ix_(pos, pos)]
        row = {s: i for i, s in enumerate(ids)}
        victimized = np.isfinite(victim_month)
        incidents = crimes[["store_id", "month"]].drop_duplicates()
        for s, m in zip(incidents["store_id"], incidents["month"]):
            i = row[s]
            near = (d[i] < config.effect_radius) & ~victimized
            near[i] = False
            rival_month[near] = np.fmin(rival_month[near], m)
    return victim_month, rival_month


def generate(config: DgpConfig) -> SyntheticMarket:
    """Draw a complete synthetic market.

    Returns
    -------
    SyntheticMarket
        ``stores``, ``transactions`` (one row per store-product-month, integer
        months), ``crimes`` and the :class:`GroundTruth`.
    """
    stores = generate_stores(config)
    crimes = generate_crimes(config, stores)
    catalog = _catalog(config)
    months = config.month_range
    T = len(months)

    agg = _global(config, _S_AGGREGATE)
    aggregate = np.cumsum(agg.normal(0.0, config.aggregate_sigma, T))
    seasonal = config.seasonal_amplitude * np.sin(2 * np.pi * (months % 12) / 12.0)
    common_cost = np.cumsum(_global(config, _S_COST).normal(0.0, config.wholesale_common_sigma, (len(catalog), T)), axis=1)

    victim_month, rival_month = _event_months(config, stores, crimes)
    popularity = catalog["popularity"].to_numpy()
    popularity = popularity / popularity.sum()
    levels = catalog["log_level"].to_numpy()
    wbar = config.wholesale_share * np.exp(levels)

    phi, sigma = config.ar_coef, config.sigma
    blocks = []
    for j in range(len(stores)):
        rp = _store_rng(config, j, _S_PRODUCTS)
        n = int(min(max(rp.poisson(config.products_mean), 1), len(catalog)))
        products = np.sort(rp.choice(len(catalog), size=n, replace=False, p=popularity))
        present = rp.uniform(size=(n, T)) < config.presence
        present &= (rp.uniform(size=T) >= config.gap_prob)[None, :]

        rr = _store_rng(config, j, _S_PRICES)
        # store inflation: AR(1) with stationary sd sigma; log level is its cumulative sum
        infl = np.empty(T)
        infl[0] = rr.normal(0.0, sigma)
        shocks = rr.normal(0.0, sigma * math.sqrt(1 - phi * phi), T)
        for t in range(1, T):
            infl[t] = phi * infl[t - 1] + shocks[t]
        store_level = np.cumsum(infl)
        effect = _effect(config.victim_path, months, victim_month[j]) + _effect(config.rival_path, months, rival_month[j])
        noise = rr.normal(0.0, config.product_sigma, (n, T))
        log_price = levels[products, None] + (store_level + aggregate + seasonal + effect)[None, :] + noise
        q = 1 + rr.poisson(config.quantity_mean * popularity[products, None] * len(catalog), (n, T))

        rw = _store_rng(config, j, _S_WHOLESALE)
        idio = rw.normal(0.0, config.wholesale_sigma, (n, T))
        wholesale = wbar[products, None] * np.exp(common_cost[products] + idio)
        bought = rw.uniform(size=(n, T)) < config.purchase_prob
        wq = np.where(bought, 1 + rw.poisson(config.quantity_mean, (n, T)), 0)

        pi, ti = np.nonzero(present)
        blocks.append(
            pd.DataFrame(
                {
                    "store": j,
                    "product": products[pi],
                    "month": months[ti],
                    "log_price": log_price[pi, ti],
                    "cost_dev": (wholesale - wbar[products, None])[pi, ti],
                    "w": wholesale[pi, ti],
                    "q": q[pi, ti],
                    "wq": wq[pi, ti],
                }
            )
        )
    cells = pd.concat(blocks, ignore_index=True)
    price = np.exp(cells["log_price"].to_numpy()) + config.passthrough * cells["cost_dev"].to_numpy()
    if config.rival_response:
        price += config.rival_response * _rival_cost_term(config, stores, cells)
    price = np.maximum(price, 0.01)
    q = cells["q"].to_numpy(dtype=float)
    wq = cells["wq"].to_numpy(dtype=float)
    tx = pd.DataFrame({"store_id": stores["store_id"].to_numpy()[cells["store"].to_numpy()]})
    for col in PRODUCT_KEY:
        values = catalog[col].to_numpy()[cells["product"].to_numpy()]
        tx[col] = pd.Categorical(values, categories=sorted(set(catalog[col])))
    tx["month"] = cells["month"].to_numpy(dtype=np.int64)
    tx["retail_revenue"] = price * q
    tx["retail_quantity"] = q
    tx["wholesale_expenditure"] = cells["w"].to_numpy() * wq
    tx["wholesale_quantity"] = wq
    tx = tx.sort_values(["store_id", "product_producer", "product_category", "product_name", "unit_weight", "month"], kind="stable")
    tx = tx.reset_index(drop=True)

    victim_fx = pd.DataFrame({"store_id": stores["store_id"], "event_month": victim_month}).dropna()
    rival_fx = pd.DataFrame({"store_id": stores["store_id"], "event_month": rival_month}).dropna()
    truth = GroundTruth(config, crimes.copy(), victim_fx.reset_index(drop=True), rival_fx.reset_index(drop=True), oracle_path(config))
    return SyntheticMarket(stores, tx, crimes, truth)


def _rival_cost_term(config: DgpConfig, stores: pd.DataFrame, cells: pd.DataFrame) -> np.ndarray:
    """Mean wholesale deviation among other stores within the effect radius carrying the same product."""
    dist = distance_matrix(stores)
    order = np.array([dist.index(s) for s in stores["store_id"]])
    near_all = dist.distances[np.ix_(order, order)] < config.effect_radius
    np.fill_diagonal(near_all, False)
    out = np.zeros(len(cells))
    months = config.month_range
    for _, g in cells.groupby("product", sort=True):
        st = g["store"].to_numpy()
        ti = g["month"].to_numpy() - months[0]
        uniq, si = np.unique(st, return_inverse=True)
        dev = np.zeros((len(uniq), len(months)))
        has = np.zeros_like(dev)
        dev[si, ti] = g["cost_dev"].to_numpy()
        has[si, ti] = 1.0
        A = near_all[np.ix_(uniq, uniq)].astype(float)
        num, den = A @ dev, A @ has
        with np.errstate(invalid="ignore", divide="ignore"):
            avg = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
        out[g.index.to_numpy()] = avg[si, ti]
    return out


def _float_text(values: np.ndarray) -> list[str]:
    return [repr(float(x)) for x in values]


def write_csvs(market: SyntheticMarket, out_dir) -> dict[str, Path]:
    """Write the ingest-schema CSVs plus ``ground_truth.csv``; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / f"{name}.csv" for name in ("stores", "transactions", "crimes", "ground_truth")}
    stores = market.stores.copy()
    stores["urban_flag"] = np.where(stores["urban_flag"], "true", "false")
    stores.to_csv(paths["stores"], index=False, lineterminator="\n")
    tx = market.transactions.copy()
    tx["month"] = [month_label(m) for m in tx["month"]]
    tx["unit_weight"] = _float_text(tx["unit_weight"].astype(float).to_numpy())
    for col in ("retail_revenue", "wholesale_expenditure"):
        tx[col] = _float_text(tx[col].to_numpy())
    for col in ("retail_quantity", "wholesale_quantity"):
        tx[col] = tx[col].astype(np.int64)
    tx.to_csv(paths["transactions"], index=False, lineterminator="\n")
    crimes = market.crimes.copy()
    crimes["month"] = [month_label(m) for m in crimes["month"]]
    crimes.to_csv(paths["crimes"], index=False, lineterminator="\n")
    market.truth.oracle.to_csv(paths["ground_truth"], index=False, lineterminator="\n", float_format="%.10g")
    return paths


def config_dict(config: DgpConfig) -> dict:
    out = asdict(config)
    out["victim_path"] = list(config.victim_path)
    out["rival_path"] = list(config.rival_path)
    return out
