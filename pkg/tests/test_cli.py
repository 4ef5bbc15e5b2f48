import csv
import json

import pytest

from cowqkd.cli import EXIT_ABORT_ONLY, EXIT_BOUND_VIOLATION, EXIT_CONFIG, EXIT_OK, main

TOY = {
    "name": "toy",
    "link": {"length_km": 0.0},
    "detectors": {"data": {"efficiency": 1.0, "dcr_ref_hz": 1e-300, "temp_k": 200.0,
                           "dead_time_s": 0.0}},
    "source": {"mu": 0.05, "intrinsic_visibility": 1.0, "intrinsic_error": 0.0},
    "operating_grid": {"temperatures_k": [200.0], "dead_times_s": [0.0]},
}


@pytest.fixture
def toy_path(tmp_path):
    path = tmp_path / "toy.json"
    path.write_text(json.dumps(TOY))
    return path


def read_json(path):
    return json.loads(path.read_text())


def test_rate_preset(tmp_path, capsys):
    assert main(["rate", "--preset", "ull_307km", "--out", str(tmp_path)]) == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert report["ell"] > 0 and report["skr_bps"] > 0
    assert read_json(tmp_path / "rate.json") == report
    manifest = read_json(tmp_path / "manifest.json")
    assert manifest["command"] == "rate" and manifest["config_path"] == "preset:ull_307km"


def test_rate_full_error_rate_aborts_cleanly(capsys):
    argv = ["rate", "--ncpp", "1e5", "--nvis", "1e4", "--qhat", "1.0", "--vobs", "0.98",
            "--mir", "0", "--mu", "0.1"]
    assert main(argv) == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert report["ell"] == 0 and report["abort_reason"]


def test_rate_fixed_beta(capsys):
    assert main(["rate", "--preset", "ull_104km", "--beta", "1e-10"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["beta_used"] == 1e-10


def test_rate_bad_beta_is_input_error(capsys):
    assert main(["rate", "--preset", "ull_104km", "--beta", "1e-3"]) == EXIT_CONFIG
    assert "beta" in capsys.readouterr().err


def test_rate_needs_inputs(capsys):
    assert main(["rate"]) == EXIT_CONFIG


def test_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    assert main(["rate", "--config", str(bad)]) == EXIT_CONFIG
    bad.write_text(json.dumps({"link": {"length_km": 1}, "source": {"mu": -1}}))
    assert main(["scan", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["rate", "--config", str(bad), "--preset", "ull_307km"]) == EXIT_CONFIG


def test_scan_single_row(tmp_path, capsys):
    argv = ["scan", "--preset", "ull_104km", "--distances", "104", "--ncpp", "1e6",
            "--bound", "new", "--out", str(tmp_path)]
    assert main(argv) == EXIT_OK
    rows = list(csv.reader((tmp_path / "scan.csv").open()))
    assert len(rows) == 2 and rows[1][2] == "new"
    assert str(tmp_path / "scan.csv") in read_json(tmp_path / "manifest.json")["output_paths"]


def test_scan_all_bounds_and_bad_range(tmp_path, capsys):
    argv = ["scan", "--preset", "ull_307km", "--distances", "200:300:50", "--ncpp", "1e5",
            "--out", str(tmp_path)]
    assert main(argv) == EXIT_OK
    rows = list(csv.DictReader((tmp_path / "scan.csv").open()))
    assert len(rows) == 9
    assert {r["bound_kind"] for r in rows} == {"new", "baseline", "asymptotic"}
    assert main(["scan", "--preset", "ull_307km", "--distances", "300:200:10",
                 "--out", str(tmp_path)]) == EXIT_CONFIG


def test_bound_check_trivial_grid_holds(tmp_path, capsys):
    grid = tmp_path / "g.json"
    grid.write_text(json.dumps({"splits": [[100, 100], [1000, 100]],
                                "error_fractions": [0.05], "eps": [1.0]}))
    assert main(["bound-check", "--grid", str(grid), "--out", str(tmp_path)]) == EXIT_OK
    assert read_json(tmp_path / "bound_check.json")["all_hold"]


def test_bound_check_negative_control(tmp_path, capsys):
    grid = tmp_path / "g.json"
    grid.write_text(json.dumps({"splits": [[1000, 100]], "error_fractions": [0.05],
                                "eps": [1e-6]}))
    argv = ["bound-check", "--grid", str(grid), "--t-scale", "0.1", "--out", str(tmp_path)]
    assert main(argv) == EXIT_BOUND_VIOLATION


def test_bound_check_resource_limit(tmp_path, capsys):
    grid = tmp_path / "g.json"
    grid.write_text(json.dumps({"splits": [[20000, 100]], "error_fractions": [0.05],
                                "eps": [1e-6]}))
    assert main(["bound-check", "--grid", str(grid), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_simulate_toy_produces_matching_keys(tmp_path, toy_path, capsys):
    argv = ["simulate", "--config", str(toy_path), "--blocks", "2", "--out", str(tmp_path)]
    assert main(argv) == EXIT_OK
    stats = read_json(tmp_path / "stats.json")
    assert all(b["q_hat"] == 0.0 and b["ell"] > 0 for b in stats["blocks"])
    for i in range(2):
        alice = (tmp_path / "keys" / f"block_{i:04d}.alice.hex").read_text()
        bob = (tmp_path / "keys" / f"block_{i:04d}.bob.hex").read_text()
        assert alice == bob


def test_simulate_is_byte_identical(tmp_path, toy_path, capsys):
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        main(["simulate", "--config", str(toy_path), "--blocks", "2", "--seed", "7",
              "--out", str(out)])
        outs.append(out)
    files = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*.hex"))
    assert files
    for rel in files + [outs[0].joinpath("stats.json").relative_to(outs[0])]:
        assert (outs[0] / rel).read_bytes() == (outs[1] / rel).read_bytes()


def test_simulate_abort_only_exit_code(tmp_path, capsys):
    argv = ["simulate", "--preset", "desk_25db", "--blocks", "2", "--out", str(tmp_path)]
    assert main(argv) == EXIT_ABORT_ONLY
    stats = read_json(tmp_path / "stats.json")
    assert all(b["ell"] == 0 and b["abort_reason"] for b in stats["blocks"])


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
