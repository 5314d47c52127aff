#!/usr/bin/env python3
"""
End-to-end tests of the command-line subcommands
"""
import csv
import json
import sys
import tempfile
from pathlib import Path

from cli import (
    IO_BASELINE_KEYS,
    LOSS_REPORT_FIELDS,
    LOSSES_KEYS,
    ROBUST_FIELDS,
    ROBUST_SUMMARY_KEYS,
    RUN_KEYS,
    SOLVE_KEYS,
    SWEEP_FIELDS,
    VALIDATE_KEYS,
    build_parser,
    run,
)
from modelio import read_json

FIXTURES = Path(__file__).parent / "fixtures"


def cbse(tmp: Path, *argv) -> int:
    return run(["--jobs", "1", "--cache-dir", str(tmp / "cache"), "--log-level", "WARNING", *argv])


def read_csv(path: Path):
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def test_parser_defaults():
    args = build_parser().parse_args(["solve", "model.json", "--ga", "0.3", "--gd", "0.4"])
    assert args.command == "solve"
    assert args.La == 3 and args.Ld == 3
    assert args.game == "fixed"
    assert args.mode == "full_node"


def test_validate_command():
    print("\n1️⃣ Testing validate...")
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        assert cbse(tmp, "validate", str(FIXTURES / "three_node.json"), "--out", str(tmp / "v.json")) == 0
        assert read_json(tmp / "v.json")["status"] == "ok"
        assert list(read_json(tmp / "v.json")) == VALIDATE_KEYS
        assert cbse(tmp, "validate", str(FIXTURES / "model_set.json")) == 0

        manifest = read_json(FIXTURES / "scalar.json")
        manifest["R"] = [["-1.0"]]
        (tmp / "bad.json").write_text(json.dumps(manifest))
        assert cbse(tmp, "validate", str(tmp / "bad.json"), "--out", str(tmp / "bad_report.json")) == 2
        report = read_json(tmp / "bad_report.json")
        assert report["status"] == "invalid"
        assert "R not positive definite" in report["reports"][0]["violations"]
        assert "run" in report

        assert cbse(tmp, "validate", str(tmp / "missing.json")) == 2

        manifest = read_json(FIXTURES / "scalar.json")
        manifest["A"] = [["5e-7"]]
        (tmp / "unstable.json").write_text(json.dumps(manifest))
        assert cbse(tmp, "--allow-marginal", "validate", str(tmp / "unstable.json")) == 2
        assert cbse(tmp, "--allow-marginal", "losses", str(tmp / "unstable.json")) == 2
    print("✅ Valid fixtures pass, R not PD is named")


def test_losses_command():
    print("\n2️⃣ Testing losses...")
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        out, report = tmp / "losses.json", tmp / "ranking.csv"
        code = cbse(tmp, "--seed", "5", "losses", str(FIXTURES / "two_node.json"),
                    "--out", str(out), "--report", str(report))
        assert code == 0
        payload = read_json(out)
        assert list(payload) == LOSSES_KEYS
        assert list(payload["run"]) == RUN_KEYS
        assert payload["run"]["command"] == "losses"
        assert payload["run"]["seed"] == 5
        assert "two_node.json" in payload["run"]["input_hashes"]
        assert len(payload["entries"]) == 4
        assert sorted(payload["ranking"]) == [1, 2]
        rows = read_csv(report)
        assert list(rows[0].keys()) == LOSS_REPORT_FIELDS
        assert [int(r["node"]) for r in rows] == payload["ranking"]

        # second run is served from the cache and gives the same payload
        again = tmp / "again.json"
        assert cbse(tmp, "--seed", "5", "losses", str(FIXTURES / "two_node.json"), "--out", str(again)) == 0
        first, second = read_json(out), read_json(again)
        first.pop("run"), second.pop("run")
        assert first == second
        assert list((tmp / "cache").glob("*.json"))
    print("✅ Loss table, ranking CSV and run header written")


def test_solve_command():
    print("\n3️⃣ Testing solve...")
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        out = tmp / "solve.json"
        code = cbse(tmp, "solve", str(FIXTURES / "two_node.json"), "--ga", "0.4", "--gd", "0.5",
                    "--La", "2", "--Ld", "2", "--check-oracle", "--out", str(out))
        assert code == 0
        payload = read_json(out)
        assert list(payload) == SOLVE_KEYS + ["oracle"]
        assert payload["game"] == "fixed"
        assert payload["oracle"]["matches"]
        assert payload["cbse"]["attacker_payoff"] >= -1e-8
        assert payload["cbse"]["fractional_payoff_pct"] == 100.0 * payload["cbse"]["attacker_payoff"] / payload["J_opt"]

        costs = tmp / "costs.json"
        costs.write_text((FIXTURES / "costs_three_node.json").read_text())
        code = cbse(tmp, "solve", str(FIXTURES / "model_set.json"), "--game", "average", "--costs", str(costs),
                    "--La", "1", "--Ld", "1", "--out", str(out))
        assert code == 0
        payload = read_json(out)
        assert payload["game"] == "average"
        assert list(payload) == SOLVE_KEYS + ["per_model"]
        assert [row["model"] for row in payload["per_model"]] == [0, 1, 2]

        # costs are required
        assert cbse(tmp, "solve", str(FIXTURES / "two_node.json")) == 2
    print("✅ Fixed and average games solved")


def test_sweep_command():
    print("\n4️⃣ Testing sweep...")
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        out = tmp / "sweep.csv"
        code = cbse(tmp, "sweep", str(FIXTURES / "two_node.json"), "--ga-grid", "0.3,0.6,-1",
                    "--gd-grid", "0.4", "--La", "2", "--Ld", "2", "--out", str(out))
        assert code == 0
        rows = read_csv(out)
        assert list(rows[0].keys()) == SWEEP_FIELDS
        assert len(rows) == 3
        assert rows[0]["error"] == "" and rows[1]["error"] == ""
        assert rows[2]["error"].startswith("ValidationError")
        sidecar = read_json(f"{out}.run.json")
        assert sidecar["results"]["rows"] == 3

        levels = tmp / "levels.csv"
        code = cbse(tmp, "sweep", str(FIXTURES / "two_node.json"), "--ga-grid", "0.3", "--gd-grid", "0.4",
                    "--sweep-levels", "--la-grid", "1,2", "--ld-grid", "1,2", "--out", str(levels))
        assert code == 0
        assert [(r["L_a"], r["L_d"]) for r in read_csv(levels)] == [("1", "1"), ("1", "2"), ("2", "1"), ("2", "2")]
    print("✅ Cost and level sweeps stream rows")


def test_robust_command():
    print("\n5️⃣ Testing robust...")
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        out = tmp / "robust.csv"
        code = cbse(tmp, "robust", str(FIXTURES / "model_set.json"), "--cost-grid", "0.3:0.4,0.4:0.5",
                    "--La", "1", "--Ld", "2", "--per-model-gd-grid", "0.4,0.6", "--controller-mismatch",
                    "--out", str(out))
        assert code == 0
        rows = read_csv(out)
        assert list(rows[0].keys()) == ROBUST_FIELDS
        assert len(rows) == 6
        nominal_rows = [r for r in rows if r["model"] == "0" and r["degenerate"] == "False"]
        assert all(float(r["mu_nominal_pct"]) == 0.0 for r in nominal_rows)

        summary = read_json(f"{out}.summary.json")
        assert list(summary) == ROBUST_SUMMARY_KEYS + ["controller_mismatch_pct"]
        assert summary["models"] == 3
        assert summary["cost_pair_weighting"] == "uniform"
        assert len(summary["controller_mismatch_pct"]) == 3
        assert abs(summary["controller_mismatch_pct"][0]) <= 1e-12
        assert len(read_csv(f"{out}.per_model.csv")) == 6
    print("✅ Mismatch CSV, per-model CSV and summary written")


def test_io_baseline_command():
    print("\n6️⃣ Testing io-baseline...")
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        out = tmp / "io.json"
        code = cbse(tmp, "io-baseline", str(FIXTURES / "two_node.json"), "--ga", "0.6", "--gd", "0.6",
                    "--La", "1", "--Ld", "2", "--out", str(out))
        assert code == 0
        payload = read_json(out)
        assert list(payload) == IO_BASELINE_KEYS
        io = payload["io"]
        assert io["defender_payoff_vs_best_response"] <= io["cbse_defender_payoff"] + 1e-8
    print("✅ IO baseline never beats the CBSE defender")


def test_repeated_runs_are_identical():
    print("\n7️⃣ Testing run-to-run determinism...")
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        payloads = []
        for attempt in ("first", "second"):
            out = tmp / f"{attempt}.json"
            code = cbse(tmp, "--seed", "3", "solve", str(FIXTURES / "three_node.json"), "--ga", "0.35",
                        "--gd", "0.45", "--La", "2", "--Ld", "2", "--out", str(out))
            assert code == 0
            payload = read_json(out)
            payload["run"].pop("timings")
            payload["run"].pop("started_at")
            payloads.append(payload)
        assert payloads[0] == payloads[1]
    print("✅ Same inputs give byte-identical results apart from timing")


def test_empty_cost_grid_is_input_error():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        assert cbse(tmp, "sweep", str(FIXTURES / "two_node.json"), "--ga-grid", ",", "--gd-grid", "0.4",
                    "--out", str(tmp / "sweep.csv")) == 2
        assert cbse(tmp, "sweep", str(FIXTURES / "two_node.json"), "--ga-grid", "0.4", "--gd-grid", "",
                    "--out", str(tmp / "sweep.csv")) == 2
        assert cbse(tmp, "robust", str(FIXTURES / "model_set.json"), "--cost-grid", ",",
                    "--out", str(tmp / "robust.csv")) == 2


def test_model_set_rejected_where_model_needed():
    with tempfile.TemporaryDirectory() as tmp:
        assert cbse(Path(tmp), "losses", str(FIXTURES / "model_set.json")) == 2


def main():
    """Run all CLI tests"""
    print("🖥️ Testing Command-Line Interface")
    print("=" * 50)

    tests = [
        ("Parser Defaults", test_parser_defaults),
        ("Validate", test_validate_command),
        ("Losses", test_losses_command),
        ("Solve", test_solve_command),
        ("Sweep", test_sweep_command),
        ("Robust", test_robust_command),
        ("IO Baseline", test_io_baseline_command),
        ("Repeated Runs", test_repeated_runs_are_identical),
        ("Empty Cost Grid", test_empty_cost_grid_is_input_error),
        ("Model Set Rejected", test_model_set_rejected_where_model_needed),
    ]

    passed = 0
    for test_name, test_func in tests:
        try:
            print(f"\n🧪 Running {test_name} Test...")
            test_func()
            print(f"✅ {test_name} test PASSED")
            passed += 1
        except Exception as e:
            print(f"❌ {test_name} test FAILED with error: {e}")
            import traceback
            traceback.print_exc()

    print("\n" + "=" * 50)
    print(f"📊 Test Results: {passed}/{len(tests)} tests passed")
    return passed == len(tests)


if __name__ == "__main__":
    success = main()
    sys.exit(0 if success else 1)
