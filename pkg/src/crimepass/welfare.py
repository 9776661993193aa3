"""Sufficient-statistics welfare accounting for a hidden per-unit tax.

A crime that raises retail prices acts like a unit tax ``tau`` that nobody
collects.  Given the marginal-cost pass-through rate ``rho`` and the conduct
parameter ``theta`` the small-tax linearization gives

* consumer surplus change ``-rho * tau * q``
* producer surplus change ``-(1 - rho * (1 - theta)) * tau * q``
* incidence ``I = rho / (1 - rho * (1 - theta))``

and the "fictional" revenue ``tau * q`` that a real tax would have raised.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass

import pandas as pd

from .errors import NegativePSFactor, NonPositiveRho, UndefinedLimit


@dataclass(frozen=True)
class Extended:
    """An extended real: a finite float or a signed infinity.

    Only the operations needed for the pass-through formula are defined, each
    with explicit limit rules: ``x / inf = 0``, ``x / 0`` is taken as the
    limit from above (``sign(x) * inf``), ``0 / 0``, ``inf / inf`` and
    ``inf - inf`` raise :class:`UndefinedLimit`.
    """

    value: float = 0.0
    sign: int = 0  # 0 finite, +1 / -1 infinite

    @classmethod
    def of(cls, x) -> "Extended":
        if isinstance(x, Extended):
            return x
        if isinstance(x, str):
            text = x.strip().lower()
            if text in ("inf", "+inf", "infinity", "+infinity"):
                return cls(0.0, 1)
            if text in ("-inf", "-infinity"):
                return cls(0.0, -1)
            x = float(text)
        x = float(x)
        if math.isnan(x):
            raise UndefinedLimit("NaN is not an extended real")
        if math.isinf(x):
            return cls(0.0, 1 if x > 0 else -1)
        return cls(x, 0)

    @property
    def finite(self) -> bool:
        return self.sign == 0

    def _sgn(self) -> int:
        return self.sign if self.sign else (self.value > 0) - (self.value < 0)

    def __add__(self, other) -> "Extended":
        other = Extended.of(other)
        if self.sign and other.sign and self.sign != other.sign:
            raise UndefinedLimit("inf - inf")
        if self.sign or other.sign:
            return Extended(0.0, self.sign or other.sign)
        return Extended(self.value + other.value)

    def __neg__(self) -> "Extended":
        return Extended(-self.value, -self.sign)

    def __sub__(self, other) -> "Extended":
        return self + (-Extended.of(other))

    def __truediv__(self, other) -> "Extended":
        other = Extended.of(other)
        if other.sign:
            if self.sign:
                raise UndefinedLimit("inf / inf")
            return Extended(0.0)
        if other.value == 0.0:
            s = self._sgn()
            if s == 0:
                raise UndefinedLimit("0 / 0")
            return Extended(0.0, s)
        if self.sign:
            return Extended(0.0, self.sign * (1 if other.value > 0 else -1))
        return Extended(self.value / other.value)

    def __rtruediv__(self, other) -> "Extended":
        return Extended.of(other) / self

    def __float__(self) -> float:
        if self.sign:
            raise UndefinedLimit("value is unbounded")
        return self.value


@dataclass(frozen=True)
class MarketPrimitives:
    """Demand, supply and conduct elasticities; any of the ``eps_*`` may be infinite."""

    eps_d: float
    eps_s: object
    theta: float
    eps_ms: object
    eps_theta: object

    def __post_init__(self):
        if not 0.0 <= float(self.theta) <= 1.0:
            raise ValueError("theta must lie in [0, 1]")


def passthrough_rate(m: MarketPrimitives) -> float:
    """Dollar pass-through of a small unit tax, ``1 / (1 + (eD - theta)/eS + theta/ems + theta/etheta)``.

    Raises
    ------
    UndefinedLimit
        For indeterminate forms, or if the rate is unbounded.
    """
    theta = Extended.of(m.theta)
    den = (
        Extended(1.0)
        + (Extended.of(m.eps_d) - theta) / m.eps_s
        + theta / m.eps_ms
        + theta / m.eps_theta
    )
    if den.finite and den.value == 0.0:
        raise UndefinedLimit("pass-through rate is unbounded (zero denominator)")
    return float(Extended(1.0) / den)


def hidden_unit_tax(semi_elasticity: float, mean_price: float, rho: float) -> float:
    """Unit tax equivalent of a proportional price effect: ``semi * price / rho``."""
    if not rho > 0:
        raise NonPositiveRho(f"pass-through rate must be positive, got {rho}")
    return semi_elasticity * mean_price / rho


@dataclass(frozen=True)
class WelfareReport:
    tau: float
    rho: float
    theta: float
    q: float
    mean_price: float | None
    price_change: float
    ps_factor: float
    delta_cs: float
    delta_ps: float
    total_harm: float
    revenue: float
    excess_burden: float
    marginal_excess_burden: float
    incidence: float
    consumer_share: float

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(list(asdict(self).items()), columns=["field", "value"])

    def to_text(self) -> str:
        lines = [
            "Hidden crime tax: welfare accounting",
            f"  unit tax tau            ${self.tau:,.4f} per unit",
            f"  pass-through rho        {self.rho:.4f}",
            f"  conduct theta           {self.theta:.4f}",
            f"  annual units q          {self.q:,.0f}",
            f"  retail price change     ${self.price_change:,.4f} per unit",
            f"  consumer surplus change ${self.delta_cs / 1e6:,.3f}M",
            f"  producer surplus change ${self.delta_ps / 1e6:,.3f}M",
            f"  total harm              ${self.total_harm / 1e6:,.3f}M",
            f"  fictional tax revenue   ${self.revenue / 1e6:,.3f}M",
            f"  excess burden           ${self.excess_burden / 1e6:,.3f}M",
            f"  incidence I             {self.incidence:.4f}",
            f"  consumer share I/(1+I)  {self.consumer_share:.2%}",
        ]
        return "\n".join(lines) + "\n"


def welfare_effects(tau: float, rho: float, theta: float, q: float, mean_price: float | None = None) -> WelfareReport:
    """Linearized surplus changes from a unit tax ``tau`` on ``q`` units a year.

    Raises
    ------
    NegativePSFactor
        If ``1 - rho * (1 - theta) <= 0``, where the producer-harm formula
        changes sign.
    """
    if not 0.0 <= theta <= 1.0:
        raise ValueError("theta must lie in [0, 1]")
    if not q > 0:
        raise ValueError("q must be positive")
    factor = 1.0 - rho * (1.0 - theta)
    if factor <= 0:
        raise NegativePSFactor(f"1 - rho(1 - theta) = {factor:.6g} <= 0")
    dp = rho * tau
    cs = -dp * q
    ps = -factor * q * tau
    total = abs(cs) + abs(ps)
    revenue = tau * q
    incidence = rho / factor
    return WelfareReport(
        tau=tau,
        rho=rho,
        theta=theta,
        q=q,
        mean_price=mean_price,
        price_change=dp,
        ps_factor=factor,
        delta_cs=cs,
        delta_ps=ps,
        total_harm=total,
        revenue=revenue,
        excess_burden=total - revenue,
        marginal_excess_burden=rho * theta * q,
        incidence=incidence,
        consumer_share=incidence / (1.0 + incidence),
    )


@dataclass(frozen=True)
class HiddenTaxSummary:
    report: WelfareReport
    monopoly_consumer_share: float
    ps_per_dollar_tax: float

    def to_frame(self) -> pd.DataFrame:
        extra = pd.DataFrame(
            [("monopoly_consumer_share", self.monopoly_consumer_share), ("ps_per_dollar_tax", self.ps_per_dollar_tax)],
            columns=["field", "value"],
        )
        return pd.concat([self.report.to_frame(), extra], ignore_index=True)

    def to_text(self) -> str:
        return self.report.to_text() + (
            f"  consumer share, theta=1 {self.monopoly_consumer_share:.2%}\n"
            f"  producer harm per $1    ${self.ps_per_dollar_tax / 1e6:,.3f}M\n"
        )


def hidden_tax_welfare(
    semi_elasticity: float,
    mean_price: float,
    rho: float,
    theta: float,
    q: float,
    round_tax_to_cents: bool = True,
) -> HiddenTaxSummary:
    """Full hidden-tax calculation from an estimated proportional price effect.

    With ``round_tax_to_cents`` the unit tax is rounded to whole cents before
    the surplus arithmetic, as a dollar figure would be quoted.
    """
    tau = hidden_unit_tax(semi_elasticity, mean_price, rho)
    if round_tax_to_cents:
        tau = round(tau, 2)
    report = welfare_effects(tau, rho, theta, q, mean_price)
    monopoly = welfare_effects(1.0, rho, 1.0, q).consumer_share
    per_dollar = welfare_effects(1.0, rho, theta, q)
    return HiddenTaxSummary(report, monopoly, abs(per_dollar.delta_ps))


def sensitivity_sweep(
    theta,
    rho=None,
    eps_d=None,
    eps_s=None,
    eps_ms=None,
    eps_theta=None,
    tau: float = 1.0,
    q: float = 1.0,
) -> pd.DataFrame:
    """Evaluate the welfare formulas on a grid.

    Either ``rho`` values are given directly, or every combination of the
    elasticity lists is turned into a rate with :func:`passthrough_rate`.
    Grid points where the formulas break down carry a ``status`` message
    instead of raising.
    """
    theta = list(theta)
    if rho is not None:
        points = [(t, r, None) for r, t in itertools.product(list(rho), theta)]
    else:
        grids = [list(g) for g in (eps_d, eps_s, eps_ms, eps_theta)]
        if any(g is None for g in (eps_d, eps_s, eps_ms, eps_theta)):
            raise ValueError("give either rho or all four elasticity ranges")
        points = []
        for ed, es, ems, eth in itertools.product(*grids):
            for t in theta:
                prim = MarketPrimitives(ed, es, t, ems, eth)
                try:
                    points.append((t, passthrough_rate(prim), prim))
                except UndefinedLimit as exc:
                    points.append((t, math.nan, prim, str(exc)))
    rows = []
    for point in points:
        t, r, prim = point[:3]
        row = {"theta": t, "rho": r}
        if prim is not None:
            row.update(eps_d=prim.eps_d, eps_s=str(prim.eps_s), eps_ms=str(prim.eps_ms), eps_theta=str(prim.eps_theta))
        if len(point) > 3:
            row["status"] = point[3]
        else:
            try:
                rep = welfare_effects(tau, r, t, q)
                row.update(
                    delta_cs=rep.delta_cs,
                    delta_ps=rep.delta_ps,
                    excess_burden=rep.excess_burden,
                    marginal_excess_burden=rep.marginal_excess_burden,
                    incidence=rep.incidence,
                    consumer_share=rep.consumer_share,
                    status="ok",
                )
            except (NegativePSFactor, ValueError) as exc:
                row["status"] = str(exc)
        rows.append(row)
    return pd.DataFrame(rows)


def incidence_monotonicity(sweep: pd.DataFrame) -> pd.DataFrame:
    """Direction of incidence in ``theta`` for each pass-through rate of a sweep."""
    rows = []
    for r, g in sweep[sweep["status"] == "ok"].groupby("rho", sort=True):
        g = g.sort_values("theta")
        d = g["incidence"].diff().dropna()
        if (d < 0).all():
            direction = "decreasing"
        elif (d > 0).all():
            direction = "increasing"
        elif (d == 0).all():
            direction = "constant"
        else:
            direction = "non-monotone"
        rows.append((r, direction, len(g)))
    return pd.DataFrame(rows, columns=["rho", "direction", "points"])
