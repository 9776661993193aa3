from __future__ import annotations

import json

import pandas as pd
import pytest

from crimepass.cli import main
from crimepass.config import load_config, parse_config

SMALL = """
[simulate]
n_stores = 150
n_towns = 10
months = 30
catalog_size = 60
products_mean = 10.0
hazard = 0.01
victim_path = [0.02]
rival_path = [0.0, 0.0, 0.015]
seed = 11

[index]
outcomes = ["price", "cost"]

[estimate]
twfe = true
heterogeneity = ["chain"]

[passthrough]
bins = 3
"""


def write_config(tmp_path, text, name="cfg.toml"):
    path = tmp_path / name
    path.write_text(text)
    return path


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root, SMALL)
    assert main(["all", "--config", str(cfg), "--out", str(root / "out")]) == 0
    return root, cfg, root / "out"


def test_effect_path_structure(small_run):
    _, _, out = small_run
    frame = pd.read_csv(out / "effect_path_price_victimized.csv")
    assert list(frame.columns) == ["outcome", "group", "kind", "L", "estimate", "se", "n", "clusters", "config_hash"]
    assert (frame["kind"] == "beta").sum() == 12
    assert frame.loc[frame["kind"] == "beta", "L"].tolist() == list(range(-5, 7))
    assert frame.loc[frame["kind"] == "E", "L"].tolist() == list(range(0, 7))
    assert frame.loc[frame["kind"] == "P", "L"].tolist() == [-2, -3, -4, -5, -6]
    for name in (
        "store_indexes.csv",
        "stacked_price_rivals.csv",
        "sub_experiments_victimized.csv",
        "effect_path_cost_rivals.csv",
        "effect_path_price_victimized_twfe.csv",
        "passthrough.csv",
        "welfare.csv",
        "welfare.txt",
        "effect_path_price_victimized.svg",
        "ground_truth.csv",
        "manifest.json",
    ):
        assert (out / name).exists(), name


def test_every_csv_carries_hash(small_run):
    _, cfg, out = small_run
    expected = load_config(cfg).hash
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config_hash"] == expected
    for path in out.glob("*.csv"):
        if path.stem in ("stores", "transactions", "crimes"):
            assert path.name in manifest["files"]
            continue
        assert set(pd.read_csv(path)["config_hash"]) == {expected}, path.name


def test_welfare_figures(small_run):
    _, _, out = small_run
    w = pd.read_csv(out / "welfare.csv").set_index("field")["value"]
    assert abs(w["delta_cs"] / 1e6 + 22.8) <= 0.1
    assert abs(w["delta_ps"] / 1e6 + 11.1) <= 0.1
    assert abs(w["excess_burden"] / 1e6 - 20.2) <= 0.1
    assert "config_hash" in (out / "welfare.txt").read_text()


def test_passthrough_specs(small_run):
    _, _, out = small_run
    pt = pd.read_csv(out / "passthrough.csv")
    assert set(pt["specification"]) == {"fd_R0", "fd_R3"}
    assert pt.loc[pt["specification"] == "fd_R3", "coefficient"].tolist() == ["own", "bin1", "bin2", "bin3", "cum1", "cum2", "cum3"]


def test_report_refuses_mixed_hashes(small_run, tmp_path, capsys):
    _, cfg, out = small_run
    mixed = tmp_path / "mixed"
    mixed.mkdir()
    for path in out.glob("effect_path_*.csv"):
        (mixed / path.name).write_bytes(path.read_bytes())
    frame = pd.read_csv(mixed / "effect_path_price_rivals.csv")
    frame["config_hash"] = "0" * 64
    frame.to_csv(mixed / "effect_path_price_rivals.csv", index=False)
    assert main(["report", "--config", str(cfg), "--out", str(mixed)]) == 1
    assert "MixedArtifacts" in capsys.readouterr().err


def test_inputs_mode_matches_simulate_mode(small_run, tmp_path):
    _, _, out = small_run
    text = SMALL.split("[index]")[1]
    cfg = write_config(
        tmp_path,
        f'[inputs]\nstores = "{out}/stores.csv"\ntransactions = "{out}/transactions.csv"\ncrimes = "{out}/crimes.csv"\n\n[index]'
        + text,
    )
    assert main(["estimate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    a = pd.read_csv(out / "effect_path_price_victimized.csv").drop(columns="config_hash")
    b = pd.read_csv(tmp_path / "o" / "effect_path_price_victimized.csv").drop(columns="config_hash")
    pd.testing.assert_frame_equal(a, b)


@pytest.mark.parametrize(
    "text, field",
    [
        ("[simulate]\nseed = 1\n[design]\nk = 0\n", "design.k"),
        ("[simulate]\nseed = 1\n[design]\nradius = 3\n", "design.radius"),
        ("[simulate]\nseed = 1\n[estimate]\ngroups = ['all']\n", "estimate.groups"),
        ("[simulate]\nhazard = 2.0\n", "simulate.hazard"),
        ('[inputs]\nstores = "a"\ntransactions = "b"\ncrimes = "c"\n[simulate]\nseed = 1\n', "inputs"),
        ("[index]\nweighting_year = 'calendar'\n", "inputs"),
        ("[simulate]\nseed = 1\n[welfare]\ntheta = 'high'\n", "welfare.theta"),
        ("[simulate]\nseed = 1\n[extra]\nx = 1\n", "extra"),
    ],
)
def test_config_errors_name_fields(tmp_path, capsys, text, field):
    cfg = write_config(tmp_path, text)
    assert main(["index", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert field in capsys.readouterr().err


def test_missing_output_dir(tmp_path, capsys):
    cfg = write_config(tmp_path, "[simulate]\nseed = 1\n")
    assert main(["welfare", "--config", str(cfg)]) == 2
    assert "out" in capsys.readouterr().err


def test_downstream_error_exit_code(tmp_path, capsys):
    cfg = write_config(tmp_path, '[inputs]\nstores = "nope.csv"\ntransactions = "t.csv"\ncrimes = "c.csv"\n')
    assert main(["index", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "crimepass index" in capsys.readouterr().err


def test_hash_ignores_output_and_threads(tmp_path):
    a = parse_config({"simulate": {"seed": 1}, "out": "x"})
    b = parse_config({"simulate": {"seed": 1}, "out": "y"}, base_dir="/elsewhere")
    c = parse_config({"simulate": {"seed": 2}})
    assert a.hash == b.hash != c.hash


def test_demo_config_parses():
    from pathlib import Path

    cfg = load_config(Path(__file__).resolve().parents[1] / "configs" / "demo.toml")
    assert cfg.simulate is not None and cfg.out
