"""Command-line pipeline: ``crimepass <subcommand> --config cfg.toml --out dir``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import pandas as pd
from threadpoolctl import threadpool_limits

from .config import PipelineConfig, load_config
from .errors import ConfigInvalid, CrimePassError, EmptyPanel, MixedArtifacts
from .estimator import RegressionSpec, attach_covariates, experiment_hhi, fit_twfe, heterogeneity_split
from .ingest import build_product_month_panel, ingest_tables, parse_month
from .passthrough import build_passthrough_panel, estimate_passthrough
from .pipeline import effect_path, index_series, make_design, outcome_column, stacked_panel
from .simulator import generate, write_csvs
from .spatial import distance_matrix, monthly_store_revenue
from .stacking import build_sub_experiments, build_twfe_panel
from .welfare import hidden_tax_welfare

log = logging.getLogger("crimepass")

SCHEMA_VERSION = 1
SUBCOMMANDS = ("simulate", "index", "stack", "estimate", "passthrough", "welfare", "report", "all")
INPUT_FILES = ("stores", "transactions", "crimes")
BAND_Z = 1.645


class Run:
    """One invocation: caches intermediate results and writes hashed artifacts."""

    def __init__(self, config: PipelineConfig, out: Path, threads: int = 1):
        self.config = config
        self.out = Path(out)
        self.threads = max(int(threads), 1)
        self.hash = config.hash
        self._cache = {}
        self.out.mkdir(parents=True, exist_ok=True)

    # artifacts -------------------------------------------------------------

    def _manifest_path(self) -> Path:
        return self.out / "manifest.json"

    def _manifest(self) -> dict:
        path = self._manifest_path()
        if path.exists():
            data = json.loads(path.read_text())
            if data.get("config_hash") == self.hash and data.get("schema_version") == SCHEMA_VERSION:
                return data
        return {"schema_version": SCHEMA_VERSION, "config_hash": self.hash, "files": {}}

    def _register(self, path: Path) -> None:
        data = self._manifest()
        data["files"][path.name] = hashlib.sha256(path.read_bytes()).hexdigest()
        data["files"] = dict(sorted(data["files"].items()))
        self._manifest_path().write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")

    def write_csv(self, frame: pd.DataFrame, name: str, hashed: bool = True) -> Path:
        frame = frame.copy()
        if hashed:
            frame["config_hash"] = self.hash
        path = self.out / name
        frame.to_csv(path, index=False, lineterminator="\n")
        self._register(path)
        return path

    def write_text(self, text: str, name: str) -> Path:
        path = self.out / name
        path.write_text(text)
        self._register(path)
        return path

    # data ------------------------------------------------------------------

    def _simulated_inputs_current(self) -> bool:
        data = self._manifest()
        files = data.get("files", {})
        for name in INPUT_FILES:
            path = self.out / f"{name}.csv"
            if not path.exists() or files.get(path.name) != hashlib.sha256(path.read_bytes()).hexdigest():
                return False
        return True

    def tables(self):
        if "tables" not in self._cache:
            cfg = self.config
            if cfg.inputs is not None:
                paths = [cfg.resolve(getattr(cfg.inputs, n)) for n in INPUT_FILES]
                window = None
                if cfg.inputs.window is not None:
                    window = tuple(parse_month(str(m)) for m in cfg.inputs.window)
            else:
                if not self._simulated_inputs_current():
                    self.simulate()
                paths = [self.out / f"{n}.csv" for n in INPUT_FILES]
                window = None
            self._cache["tables"] = ingest_tables(*paths, window=window)
        return self._cache["tables"]

    def cells(self):
        if "cells" not in self._cache:
            self._cache["cells"] = build_product_month_panel(self.tables().transactions)
        return self._cache["cells"]

    def dist(self):
        if "dist" not in self._cache:
            self._cache["dist"] = distance_matrix(self.tables().stores, threads=self.threads)
        return self._cache["dist"]

    def series(self):
        if "series" not in self._cache:
            ic = self.config.index
            wins = (ic.winsor_lower, ic.winsor_upper) if ic.winsorize else None
            self._cache["series"] = index_series(self.cells(), ic.outcomes, ic.weighting_year, wins, self.threads)
        return self._cache["series"]

    def design(self):
        if "design" not in self._cache:
            est = self.config.estimate
            t = self.tables()
            offset = est.placebo_offset if est.placebo else None
            self._cache["design"] = make_design(t.stores, t.crimes, self.dist(), self.config.design, offset)
        return self._cache["design"]

    def panels(self):
        if "panels" not in self._cache:
            est = self.config.estimate
            panels, dropped = {}, {}
            subs = {g: build_sub_experiments(self.design(), g) for g in est.groups}
            for outcome in self.config.index.outcomes:
                for group in est.groups:
                    panel, drops = stacked_panel(
                        self.series(),
                        self.design(),
                        group,
                        outcome,
                        est.balanced_share if est.balanced else None,
                        est.wing_weights,
                        subs[group],
                    )
                    panels[outcome, group] = panel
                    dropped[group] = drops
            self._cache["panels"] = panels, dropped
        return self._cache["panels"]

    # stages ------------------------------------------------------------------

    def simulate(self):
        if self.config.simulate is None:
            raise ConfigInvalid("simulate", "no [simulate] section in the configuration")
        market = generate(self.config.simulate)
        paths = write_csvs(market, self.out)
        for name in INPUT_FILES:
            self._register(paths[name])
        truth = pd.read_csv(paths["ground_truth"])
        self.write_csv(truth, "ground_truth.csv")

    def index(self):
        series = self.series().copy()
        self.write_csv(series, "store_indexes.csv")

    def stack(self):
        panels, dropped = self.panels()
        for (outcome, group), panel in panels.items():
            rows = panel.rows.drop(columns=["event_month"]).rename(columns={"y": outcome_column(outcome)})
            self.write_csv(rows, f"stacked_{outcome}_{group}.csv")
        for group in self.config.estimate.groups:
            panel = panels[self.config.index.outcomes[0], group]
            exp = panel.experiments.copy()
            exp["status"] = "ok"
            drops = pd.DataFrame(dropped.get(group, []), columns=["incident_id", "status"])
            exp = pd.concat([exp, drops], ignore_index=True)
            self.write_csv(exp, f"sub_experiments_{group}.csv")

    def _covariates(self):
        path = self.config.estimate.covariates
        if not path:
            return None
        cov = pd.read_csv(self.config.resolve(path))
        if not {"store_id", "month"} <= set(cov.columns):
            raise ConfigInvalid("estimate.covariates", "covariate file needs store_id and month columns")
        cov["store_id"] = cov["store_id"].astype(str)
        cov["month"] = [parse_month(str(m)) for m in cov["month"]]
        return cov

    def estimate(self):
        est = self.config.estimate
        panels, _ = self.panels()
        cov = self._covariates()
        controls = tuple(c for c in cov.columns if c not in ("store_id", "month")) if cov is not None else ()
        splits = []
        for (outcome, group), panel in panels.items():
            if cov is not None:
                panel = attach_covariates(panel, cov)
            path = effect_path(panel, weighted=est.wing_weights, controls=controls)
            self.write_csv(path.to_frame(), f"effect_path_{outcome}_{group}.csv")
            if est.twfe:
                rows = build_twfe_panel(self.series(), outcome_column(outcome), self.design(), group)
                twfe = fit_twfe(rows, RegressionSpec(k=self.config.design.k), outcome, group)
                self.write_csv(twfe.to_frame(), f"effect_path_{outcome}_{group}_twfe.csv")
            for rule in est.heterogeneity:
                hhi = None
                if rule in ("hhi", "urban_hhi"):
                    revenue = monthly_store_revenue(self.cells())
                    hhi = experiment_hhi(panel, self.dist(), revenue, est.hhi_radius, est.hhi_window)
                for part, sub in heterogeneity_split(panel, rule, self.tables().stores, hhi).items():
                    status = "ok"
                    try:
                        fitted = effect_path(sub, weighted=est.wing_weights, controls=controls)
                        self.write_csv(fitted.to_frame(), f"effect_path_{outcome}_{group}_{rule}_{part}.csv")
                    except EmptyPanel:
                        status = "empty"
                    except CrimePassError as exc:
                        status = f"{type(exc).__name__}: {exc}"
                    splits.append((outcome, group, rule, part, len(sub.experiments), len(sub.rows), status))
        if splits:
            frame = pd.DataFrame(splits, columns=["outcome", "group", "rule", "part", "experiments", "rows", "status"])
            self.write_csv(frame, "splits.csv")

    def passthrough(self):
        pc = self.config.passthrough
        if not pc.enabled:
            log.info("passthrough disabled")
            return
        frames = []
        for variant in pc.variants:
            panel = build_passthrough_panel(self.cells(), self.dist(), pc.bins, pc.width, variant)
            for R in sorted({0, pc.bins}):
                fit = estimate_passthrough(panel, R, variant)
                frames.append(fit.to_frame(f"{variant}_R{R}"))
        self.write_csv(pd.concat(frames, ignore_index=True), "passthrough.csv")

    def welfare(self):
        w = self.config.welfare
        summary = hidden_tax_welfare(w.semi_elasticity, w.mean_price, w.rho, w.theta, w.q, w.round_tax_to_cents)
        self.write_csv(summary.to_frame(), "welfare.csv")
        self.write_text(f"config_hash {self.hash}\n" + summary.to_text(), "welfare.txt")

    def report(self):
        paths = sorted(self.out.glob("effect_path_*.csv"))
        hashes = set()
        for csv in sorted(self.out.glob("*.csv")):
            header = pd.read_csv(csv, nrows=0).columns
            if "config_hash" in header:
                hashes.update(pd.read_csv(csv, usecols=["config_hash"])["config_hash"].astype(str).unique())
        if len(hashes) > 1:
            raise MixedArtifacts(f"artifacts in {self.out} come from {len(hashes)} different configurations")
        if not paths:
            log.warning("no effect paths to plot in %s", self.out)
        for csv in paths:
            svg = csv.with_suffix(".svg")
            render_effect_path(pd.read_csv(csv), svg, title=csv.stem.removeprefix("effect_path_"))
            self._register(svg)

    def all(self):
        if self.config.simulate is not None:
            self.simulate()
        for stage in ("index", "stack", "estimate", "passthrough", "welfare", "report"):
            getattr(self, stage)()


def render_effect_path(frame: pd.DataFrame, path: Path, title: str = "") -> None:
    """Event-time plot of cumulative effects with 90% bands (estimate +/- 1.645 SE)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cum = frame[frame["kind"].isin(["E", "P"])]
    base = pd.DataFrame({"L": [-1], "estimate": [0.0], "se": [0.0]})
    pts = pd.concat([cum[["L", "estimate", "se"]], base], ignore_index=True).sort_values("L")
    x, y, se = pts["L"].to_numpy(), pts["estimate"].to_numpy(), pts["se"].to_numpy()
    with matplotlib.rc_context({"svg.hashsalt": "crimepass", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.fill_between(x, y - BAND_Z * se, y + BAND_Z * se, alpha=0.25, linewidth=0)
        ax.plot(x, y, marker="o")
        ax.axhline(0.0, color="black", linewidth=0.8)
        ax.axvline(-0.5, color="grey", linestyle="--", linewidth=0.8)
        ax.set_xlabel("months relative to incident")
        ax.set_ylabel("cumulative log change")
        ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crimepass", description=__doc__)
    parser.add_argument("command", choices=SUBCOMMANDS)
    parser.add_argument("--config", required=True, help="TOML configuration file")
    parser.add_argument("--out", help="output directory (overrides 'out' in the config)")
    parser.add_argument("--threads", type=int, default=1, help="worker threads; results do not depend on it")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def run(command: str, config: PipelineConfig, out, threads: int = 1) -> Run:
    job = Run(config, out, threads)
    with threadpool_limits(limits=1):
        getattr(job, command)()
    return job


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config)
        out = args.out or (str(config.resolve(config.out)) if config.out else None)
        if out is None:
            raise ConfigInvalid("out", "no output directory: pass --out or set 'out' in the config")
        run(args.command, config, out, args.threads)
    except ConfigInvalid as exc:
        print(f"crimepass {args.command}: config error: {exc}", file=sys.stderr)
        return 2
    except (CrimePassError, FileNotFoundError) as exc:
        print(f"crimepass {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
