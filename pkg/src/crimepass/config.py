"""Pipeline configuration: a TOML file with one table per stage."""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigInvalid
from .simulator import DgpConfig, config_dict
from .stacking import DesignConfig

OUTCOMES = ("price", "quantity", "cost")
SPLITS = ("chain", "hhi", "urban_hhi")


@dataclass(frozen=True)
class InputPaths:
    stores: str
    transactions: str
    crimes: str
    window: tuple | None = None


@dataclass(frozen=True)
class IndexConfig:
    weighting_year: str = "calendar"
    outcomes: tuple = OUTCOMES
    winsorize: bool = False
    winsor_lower: float = 0.005
    winsor_upper: float = 0.995


@dataclass(frozen=True)
class EstimateConfig:
    groups: tuple = ("victimized", "rivals")
    placebo: bool = False
    placebo_offset: int = -12
    balanced: bool = False
    balanced_share: float = 0.75
    wing_weights: bool = False
    twfe: bool = False
    heterogeneity: tuple = ()
    hhi_radius: float = 5.0
    hhi_window: int = 12
    covariates: str | None = None


@dataclass(frozen=True)
class PassthroughConfig:
    enabled: bool = True
    bins: int = 9
    width: float = 5.0
    variants: tuple = ("fd",)


@dataclass(frozen=True)
class WelfareConfig:
    semi_elasticity: float = 0.018
    mean_price: float = 27.93
    rho: float = 1.67
    theta: float = 0.89
    q: float = 45_520_552
    round_tax_to_cents: bool = True


@dataclass(frozen=True)
class PipelineConfig:
    inputs: InputPaths | None = None
    simulate: DgpConfig | None = None
    index: IndexConfig = field(default_factory=IndexConfig)
    design: DesignConfig = field(default_factory=DesignConfig)
    estimate: EstimateConfig = field(default_factory=EstimateConfig)
    passthrough: PassthroughConfig = field(default_factory=PassthroughConfig)
    welfare: WelfareConfig = field(default_factory=WelfareConfig)
    out: str | None = None
    base_dir: str = "."

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            if f.name in ("out", "base_dir"):
                continue
            value = getattr(self, f.name)
            if value is None:
                continue
            out[f.name] = config_dict(value) if isinstance(value, DgpConfig) else _plain(asdict(value))
        return out

    @property
    def hash(self) -> str:
        return config_hash(self)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def config_hash(config: PipelineConfig) -> str:
    """SHA-256 of the canonical JSON form; output directory and thread count do not enter."""
    text = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _section(cls, data, name: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigInvalid(name, "expected a table")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigInvalid(f"{name}.{key}", "unknown field")
        default = known[key].default
        if isinstance(default, tuple) or key in ("window", "victim_path", "rival_path"):
            if not isinstance(value, list):
                raise ConfigInvalid(f"{name}.{key}", "expected an array")
            value = tuple(value)
        elif isinstance(default, bool) and not isinstance(value, bool):
            raise ConfigInvalid(f"{name}.{key}", "expected true or false")
        elif isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        elif isinstance(default, (int, float)) and not isinstance(default, bool):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigInvalid(f"{name}.{key}", "expected a number")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigInvalid as exc:
        raise ConfigInvalid(f"{name}.{exc.field.split('.')[-1]}", str(exc).split(": ", 1)[-1]) from None
    except TypeError as exc:
        raise ConfigInvalid(name, str(exc)) from None


def parse_config(data: dict, base_dir=".") -> PipelineConfig:
    allowed = {"inputs", "simulate", "index", "design", "estimate", "passthrough", "welfare", "out"}
    for key in data:
        if key not in allowed:
            raise ConfigInvalid(key, "unknown section")
    has_inputs, has_sim = "inputs" in data, "simulate" in data
    if has_inputs == has_sim:
        raise ConfigInvalid("inputs", "exactly one of [inputs] or [simulate] must be present")
    inputs = None
    if has_inputs:
        raw = data["inputs"]
        for key in ("stores", "transactions", "crimes"):
            if not isinstance(raw.get(key), str):
                raise ConfigInvalid(f"inputs.{key}", "path required")
        inputs = _section(InputPaths, raw, "inputs")
        if inputs.window is not None and len(inputs.window) != 2:
            raise ConfigInvalid("inputs.window", "expected [first, last] months")
    simulate = _section(DgpConfig, data["simulate"], "simulate") if has_sim else None
    index = _section(IndexConfig, data.get("index"), "index")
    if index.weighting_year not in ("calendar", "fiscal-July"):
        raise ConfigInvalid("index.weighting_year", "expected 'calendar' or 'fiscal-July'")
    bad = [o for o in index.outcomes if o not in OUTCOMES]
    if bad or not index.outcomes:
        raise ConfigInvalid("index.outcomes", f"expected a non-empty subset of {OUTCOMES}")
    if not 0 <= index.winsor_lower <= index.winsor_upper <= 1:
        raise ConfigInvalid("index.winsor_lower", "need 0 <= lower <= upper <= 1")
    design = _section(DesignConfig, data.get("design"), "design")
    estimate = _section(EstimateConfig, data.get("estimate"), "estimate")
    bad = [g for g in estimate.groups if g not in ("victimized", "rivals")]
    if bad or not estimate.groups:
        raise ConfigInvalid("estimate.groups", "expected a non-empty subset of ['victimized', 'rivals']")
    bad = [h for h in estimate.heterogeneity if h not in SPLITS]
    if bad:
        raise ConfigInvalid("estimate.heterogeneity", f"unknown rule {bad[0]!r}; expected one of {SPLITS}")
    if not 0 < estimate.balanced_share <= 1:
        raise ConfigInvalid("estimate.balanced_share", "must lie in (0, 1]")
    passthrough = _section(PassthroughConfig, data.get("passthrough"), "passthrough")
    if passthrough.bins < 0 or passthrough.width <= 0:
        raise ConfigInvalid("passthrough.bins", "need bins >= 0 and width > 0")
    bad = [v for v in passthrough.variants if v not in ("fd", "level", "log")]
    if bad:
        raise ConfigInvalid("passthrough.variants", f"unknown variant {bad[0]!r}")
    welfare = _section(WelfareConfig, data.get("welfare"), "welfare")
    if not 0 <= welfare.theta <= 1:
        raise ConfigInvalid("welfare.theta", "must lie in [0, 1]")
    if not welfare.q > 0:
        raise ConfigInvalid("welfare.q", "must be positive")
    out = data.get("out")
    if out is not None and not isinstance(out, str):
        raise ConfigInvalid("out", "expected a path string")
    return PipelineConfig(inputs, simulate, index, design, estimate, passthrough, welfare, out, str(base_dir))


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigInvalid(str(path), f"invalid TOML: {exc}") from None
    return parse_config(data, base_dir=path.parent)
