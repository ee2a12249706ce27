import csv
import json
from pathlib import Path

import pytest

from qkdco import cli, model, presets

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"
DATA = ROOT / "data"


def run(*argv) -> int:
    return cli.main([str(a) for a in argv])


def test_skr_back_to_back(tmp_path, capsys):
    assert run("skr", "--config", CONFIGS / "back_to_back.json") == cli.EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert out["skr"] > 0


def test_skr_overrides_match_library(tmp_path):
    out = tmp_path / "r.json"
    assert run("skr", "--config", CONFIGS / "ingaas.json", "--loss", 8, "--power", -15, "--out", out) == 0
    from qkdco.rates import analytic_key

    s = model.load_scenario(CONFIGS / "ingaas.json").with_channel(quantum_loss_db=8.0, classical_input_dbm=-15.0)
    assert json.loads(out.read_text())["skr"] == analytic_key(s).skr


def test_sweep_rows_and_determinism(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    args = ["sweep", "--config", CONFIGS / "ingaas.json", "--config", CONFIGS / "upconversion.json",
            "--loss", "3:8:1", "--power", "-20:-14:2"]
    assert run(*args, "--out", a) == 0
    assert run(*args, "--out", b) == 0
    assert a.read_bytes() == b.read_bytes()
    rows = list(csv.DictReader(a.open()))
    assert len(rows) == 6 * 4 * 2
    assert list(rows[0]) == list(cli.SWEEP_COLUMNS)
    keys = [(float(r["quantum_loss_db"]), float(r["classical_input_dbm"]), r["receiver_id"]) for r in rows]
    assert keys == sorted(keys)


def test_sweep_thread_count_does_not_change_output():
    bases = {"ingaas": presets.scenario("ingaas", 3.0), "upconversion": presets.scenario("upconversion", 3.0)}
    one = cli.sweep(bases, [3.0, 5.0, 8.0], [-20.0, -10.0], workers=1).to_csv()
    many = cli.sweep(bases, [3.0, 5.0, 8.0], [-20.0, -10.0], workers=4).to_csv()
    assert one == many


def test_simulate_is_reproducible(tmp_path):
    outs = []
    for tag in "ab":
        summary, records = tmp_path / f"{tag}.json", tmp_path / f"{tag}.csv"
        assert run("simulate", "--config", CONFIGS / "upconversion.json", "--pulses", 200000,
                   "--seed", 7, "--records", records, "--out", summary) == 0
        outs.append((summary.read_bytes(), records.read_bytes()))
    assert outs[0] == outs[1]
    assert outs[0][1].decode().splitlines()[0] == ",".join(__import__("qkdco.mc", fromlist=["x"]).CSV_HEADER)


def test_optimize_with_spec(tmp_path):
    out = tmp_path / "o.json"
    assert run("optimize", "--config", CONFIGS / "ingaas.json", "--spec", CONFIGS / "optimize_spec.json",
               "--out", out) == 0
    d = json.loads(out.read_text())
    assert d["result"]["skr"] >= d["grid_skr"] > 0


def test_calibrate_and_scan(tmp_path, capsys):
    assert run("calibrate", "--input", DATA / "noise_calibration_synthetic.csv", "--dark-rate", 700) == 0
    assert json.loads(capsys.readouterr().out)["noise_spectral_density"] > 0
    assert run("calibrate", "--config", CONFIGS / "ingaas.json", "--threshold-dbm", -12) == 0
    kappa = json.loads(capsys.readouterr().out)["noise_spectral_density"]
    assert kappa == pytest.approx(presets.NOISE_SPECTRAL_DENSITY, rel=1e-3)
    assert run("scan-noise", "--input", DATA / "channel_scan_synthetic.csv", "--dark-rate", 100) == 0
    scan = json.loads(capsys.readouterr().out)
    assert max(scan["normalized"].values()) == 1.0
    assert scan["normalized"][str(scan["argmax"])] == 1.0


@pytest.mark.parametrize("argv", [
    ["skr"],
    ["skr", "--config", "missing.json"],
    ["skr", "--bogus"],
    ["nope"],
    ["sweep", "--config", "configs/ingaas.json", "--loss", "5:3:1", "--power", "-20:-10:2"],
    ["simulate", "--config", "configs/ingaas.json", "--pulses", "0", "--seed", "1"],
    ["calibrate", "--input", "data/channel_scan_synthetic.csv", "--dark-rate", "0"],
    ["calibrate"],
])
def test_invalid_input_exit_code(argv, monkeypatch, capsys):
    monkeypatch.chdir(ROOT)
    assert cli.main(argv) == cli.EXIT_INVALID
    assert capsys.readouterr().err


def test_invalid_scenario_values(tmp_path):
    d = json.loads((CONFIGS / "ingaas.json").read_text())
    d["source"]["mu2"] = d["source"]["mu1"]
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(d))
    out = tmp_path / "out.json"
    assert run("skr", "--config", bad, "--out", out) == cli.EXIT_INVALID
    assert not out.exists()


def test_runtime_error_exit_code_leaves_no_file(tmp_path):
    # no threshold exists when the link carries no key even without noise
    s = presets.scenario("ingaas", 8.0, extra_loss_db=40.0)
    cfg = tmp_path / "dead.json"
    model.dump_scenario(s, cfg)
    out = tmp_path / "k.json"
    assert run("calibrate", "--config", cfg, "--out", out) == cli.EXIT_RUNTIME
    assert not out.exists()
    assert [p.name for p in tmp_path.iterdir()] == ["dead.json"]


def test_negative_range_values_parse():
    assert cli.parse_range("-20:-16:2", "--power") == [-20.0, -18.0, -16.0]
    assert cli.parse_range("5", "--loss") == [5.0]
