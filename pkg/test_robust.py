#!/usr/bin/env python3
"""
Tests for games over uncertain model sets: average-payoff game, nominal-model
game and their mismatch statistics
"""
import sys
from pathlib import Path

import numpy as np
import pytest

from errors import DegenerateDenominator, ValidationError, WeightSumMismatch
from game import GameConfig, enumerate_actions, payoff_attacker, solve_cbbi
from lincontrol import StateSpaceModel
from lossmap import LossTable
from modelio import load_model_set
from robust import (
    MismatchStats,
    ModelSet,
    RobustGameSolver,
    controller_mismatch,
    evaluate_strategy,
    mismatch_statistics,
    nominal_mismatch,
    solve_average_game,
)

FIXTURES = Path(__file__).parent / "fixtures"
COST_GRID = [(0.2, 0.4), (0.3, 0.5), (0.5, 0.5), (0.15, 0.6), (0.6, 0.4), (0.25, 0.45)]


def synthetic_table(deltas, model_id: str) -> LossTable:
    deltas = np.asarray(deltas, dtype=float)
    n = deltas.size.bit_length() - 1
    return LossTable(model_id=model_id, mode="full_node", n=n, J_opt=1.0,
                     J_by_pattern=1.0 + deltas, delta_by_pattern=deltas,
                     convergence_flags=np.ones(deltas.size, dtype=bool))


def dyadic_family(seed: int):
    """Three tables whose (1/2, 1/4, 1/4) mixture is exactly the first"""
    rng = np.random.default_rng(seed)
    base = rng.integers(1, 16, 8) / 8.0
    base[-1] = 0.0
    spread = rng.integers(0, 2, 8) * base / 2.0
    tables = [synthetic_table(base, "base"), synthetic_table(base + spread, "high"),
              synthetic_table(base - spread, "low")]
    return tables, [0.5, 0.25, 0.25]


def test_average_payoff_paths_agree():
    print("\n1️⃣ Testing expected-loss vs expected-payoff evaluation...")
    rng = np.random.default_rng(20)
    tables = [synthetic_table(np.append(rng.random(7), 0.0), f"m{j}") for j in range(3)]
    phi = [0.2, 0.3, 0.5]
    solver = RobustGameSolver(tables, phi)
    actions_a = enumerate_actions(3, 3, [0.2, 0.25, 0.3])
    actions_d = enumerate_actions(3, 3, [0.3, 0.2, 0.25])
    for _ in range(100):
        a = actions_a[int(rng.integers(len(actions_a)))]
        d = actions_d[int(rng.integers(len(actions_d)))]
        combined = payoff_attacker(a, d, solver.average_table)
        expected = sum(p * payoff_attacker(a, d, t) for p, t in zip(phi, tables))
        assert abs(combined - expected) <= 1e-12
    print("✅ Both paths agree on 100 random pairs")


def test_nominal_mismatch_at_nominal_is_zero():
    print("\n2️⃣ Testing mismatch sanity...")
    tables, phi = dyadic_family(1)
    solver = RobustGameSolver(tables, phi, nominal_index=0)
    for gamma_a, gamma_d in COST_GRID:
        config = GameConfig.uniform(3, 2, 2, gamma_a, gamma_d)
        try:
            assert solver.nominal_mismatch(0, config) == 0.0
            assert solver.average_mismatch(0, config) == 0.0
        except DegenerateDenominator:
            continue
        for i in range(3):
            row = solver.compare_games(i, config)
            if not row["degenerate"]:
                assert row["mu_nominal_pct"] >= 0.0
                assert row["mu_average_pct"] >= 0.0
    print("✅ Zero mismatch where the designs coincide")


def test_singleton_and_duplicated_sets():
    rng = np.random.default_rng(4)
    table = synthetic_table(np.append(rng.random(7), 0.0), "only")
    config = GameConfig.uniform(3, 2, 2, 0.3, 0.4)

    single = RobustGameSolver([table])
    assert single.nominal_mismatch(0, config) == 0.0
    assert single.average_mismatch(0, config) == 0.0

    copies = RobustGameSolver([table, table, table])
    direct = solve_cbbi(config, table)
    average = copies.average_cbse(config)
    assert average.a_star == direct.a_star
    assert average.d_star == direct.d_star
    assert average.attacker_payoff == pytest.approx(direct.attacker_payoff, abs=1e-12)
    for i in range(3):
        assert copies.average_mismatch(i, config) == pytest.approx(0.0, abs=1e-9)
        assert copies.nominal_mismatch(i, config) == 0.0


def test_mismatch_statistics():
    print("\n3️⃣ Testing mismatch statistics...")
    tables, phi = dyadic_family(7)
    solver = RobustGameSolver(tables, phi, nominal_index=0)
    config = GameConfig.uniform(3, 2, 2, 0.3, 0.3)
    nominal, average = solver.mismatch_statistics(COST_GRID, config)
    assert nominal.values and average.values
    assert min(nominal.values) == 0.0
    assert min(average.values) == 0.0
    assert all(v >= 0.0 for v in nominal.values + average.values)
    assert nominal.summary()["count"] + nominal.degenerate == len(COST_GRID) * 3

    # reordering the models (and the nominal index with them) changes nothing
    order = [2, 0, 1]
    shuffled = RobustGameSolver([tables[k] for k in order], [phi[k] for k in order], nominal_index=1)
    nominal2, average2 = shuffled.mismatch_statistics(COST_GRID, config)
    assert sorted(nominal2.values) == sorted(nominal.values)
    assert sorted(average2.values) == sorted(average.values)

    with pytest.raises(ValidationError):
        solver.mismatch_statistics([], config)
    print(f"✅ {len(nominal.values)} nominal and {len(average.values)} average mismatches")


def test_degenerate_denominator():
    tables, phi = dyadic_family(3)
    solver = RobustGameSolver(tables, phi)
    # full protection is affordable: every ideal payoff is zero
    config = GameConfig.uniform(3, 2, 2, 0.3, 0.3)
    protected = config.with_costs(0.3, 0.1)
    with pytest.raises(DegenerateDenominator):
        solver.nominal_mismatch(1, protected)
    row = solver.compare_games(1, protected)
    assert row["degenerate"]
    assert row["mu_nominal_pct"] is None

    nominal, _ = solver.mismatch_statistics([(0.3, 0.1)], config)
    assert nominal.degenerate == 3
    assert nominal.summary() == {"count": 0, "degenerate": 3}


def test_per_model_sweep():
    tables, phi = dyadic_family(5)
    solver = RobustGameSolver(tables, phi)
    config = GameConfig.uniform(3, 2, 2, 0.3, 0.3)
    rows = list(solver.per_model_sweep(config, [0.2, 0.4]))
    assert len(rows) == 6
    assert [row["model"] for row in rows] == [0, 1, 2, 0, 1, 2]
    assert all(row["gamma_a"] == 0.3 for row in rows)
    for row in rows:
        result = solver.ideal_cbse(row["model"], config.with_costs(0.3, row["gamma_d"]))
        assert row["ideal_fractional_pct"] == pytest.approx(100.0 * result.attacker_payoff)


def test_evaluate_strategy():
    tables, _ = dyadic_family(9)
    config = GameConfig.uniform(3, 2, 2, 0.3, 0.3)
    result = solve_cbbi(config, tables[0])
    assert evaluate_strategy((result.a_star, result.d_star), tables[0]) == pytest.approx(result.attacker_payoff,
                                                                                       abs=1e-12)


def test_mismatch_stats_summary():
    stats = MismatchStats()
    for value in (4.0, 0.0, 2.0, 1.0, 3.0):
        stats.add(value)
    summary = stats.summary()
    assert summary["min"] == 0.0
    assert summary["q1"] == 1.0
    assert summary["median"] == 2.0
    assert summary["q3"] == 3.0
    assert summary["max"] == 4.0
    assert summary["mean"] == 2.0
    assert stats.to_dict()["values"] == [0.0, 1.0, 2.0, 3.0, 4.0]


def test_model_set_validation():
    print("\n4️⃣ Testing model-set validation...")
    model_set = load_model_set(FIXTURES / "model_set.json")
    assert model_set.size == 3
    assert np.allclose(model_set.phi, [1 / 3] * 3)

    models = model_set.models
    with pytest.raises(WeightSumMismatch):
        ModelSet(models, [0.5, 0.3, 0.1])
    with pytest.raises(ValidationError):
        ModelSet(models, nominal_index=3)
    other_B = StateSpaceModel(A=models[0].A, B=2.0 * models[0].B, D=models[0].D, Q=models[0].Q,
                              R=models[0].R, partition=models[0].partition, name="other")
    with pytest.raises(ValidationError):
        ModelSet([models[0], other_B])
    print("✅ Weights, nominal index and shared B/D are checked")


def test_games_over_model_set():
    print("\n5️⃣ Testing robust games on the model-set fixture...")
    model_set = load_model_set(FIXTURES / "model_set.json")
    solver = RobustGameSolver.from_model_set(model_set)
    config = GameConfig.uniform(3, 2, 2, 0.3, 0.4)

    average = solve_average_game(solver, config)
    assert average.attacker_payoff >= -config.payoff_tie_tol
    assert nominal_mismatch(solver, config, 0) == 0.0
    nominal, average_stats = mismatch_statistics(solver, [(0.3, 0.4), (0.4, 0.3)], config)
    assert all(v >= 0.0 for v in nominal.values + average_stats.values)

    assert controller_mismatch(model_set, 0) == pytest.approx(0.0, abs=1e-12)
    assert controller_mismatch(model_set, 1) >= -1e-9
    assert solver.controller_mismatch(2) >= -1e-9
    print(f"✅ Average-game payoff {average.attacker_payoff:.6f}")


def main():
    """Run all robust-game tests"""
    print("🌐 Testing Robust Games")
    print("=" * 50)

    tests = [
        ("Average Payoff Paths", test_average_payoff_paths_agree),
        ("Mismatch at Nominal", test_nominal_mismatch_at_nominal_is_zero),
        ("Singleton and Duplicated Sets", test_singleton_and_duplicated_sets),
        ("Mismatch Statistics", test_mismatch_statistics),
        ("Degenerate Denominator", test_degenerate_denominator),
        ("Per-Model Sweep", test_per_model_sweep),
        ("Evaluate Strategy", test_evaluate_strategy),
        ("Stats Summary", test_mismatch_stats_summary),
        ("Model-Set Validation", test_model_set_validation),
        ("Games over Model Set", test_games_over_model_set),
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
