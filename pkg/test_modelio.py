#!/usr/bin/env python3
"""
Tests for model manifests, validation, the consensus weight and table files
"""
import json
import sys
import tempfile
from pathlib import Path

import numpy as np
import pytest

from errors import HashMismatch, ParseError, PartitionTooSmall, ValidationError
from lincontrol import StateSpaceModel, is_hurwitz
from lossmap import build_loss_table
from modelio import (
    build_consensus_Q,
    consensus_q_grouped,
    grouped_permutation,
    load_loss_table,
    load_model,
    load_model_set,
    model_from_manifest,
    model_to_manifest,
    random_model,
    read_json,
    save_loss_table,
    save_model,
    validate_model,
    write_json_atomic,
)

FIXTURES = Path(__file__).parent / "fixtures"


def scalar_model(A=-1.0, Q=1.0, R=1.0) -> StateSpaceModel:
    return StateSpaceModel(A=[[A]], B=[[1.0]], D=[[1.0]], Q=[[Q]], R=[[R]], partition=[(1, 1)], name="scalar")


def test_load_fixtures():
    print("\n1️⃣ Testing fixture loading...")
    for name in ("scalar", "two_node", "three_node", "three_node_light", "three_node_heavy"):
        model = load_model(FIXTURES / f"{name}.json")
        assert model.name == name
        assert validate_model(model) == []
    model = load_model(FIXTURES / "three_node.json")
    assert (model.m, model.r, model.q, model.n) == (6, 3, 6, 3)
    assert model.partition == ((2, 1), (2, 1), (2, 1))
    print("✅ All fixtures load and validate")


def test_reordered_manifest_matches_grouped():
    print("\n2️⃣ Testing angles-first ordering...")
    grouped = load_model(FIXTURES / "three_node.json")
    reordered = load_model(FIXTURES / "three_node_reordered.json")
    for name in ("A", "B", "D", "Q", "R"):
        assert np.array_equal(getattr(grouped, name), getattr(reordered, name)), name
    assert list(grouped_permutation(grouped.partition)) == [0, 2, 4, 1, 3, 5]
    print("✅ Reordered manifest converts to grouped ordering")


def test_consensus_weight():
    print("\n3️⃣ Testing consensus weight...")
    partition = [(2, 1), (3, 1), (2, 1)]
    Q = build_consensus_Q(partition)
    assert Q.shape == (7, 7)
    assert np.array_equal(Q, Q.T)
    assert np.min(np.linalg.eigvalsh(Q)) >= -1e-12
    assert np.array_equal(Q[:3, :3], 3 * np.eye(3) - np.ones((3, 3)))
    assert np.array_equal(Q[3:, 3:], np.eye(4))

    grouped = consensus_q_grouped(partition)
    # angle of node 2 is grouped state 2, frequency of node 1 is grouped state 1
    assert grouped[2, 2] == 2.0
    assert grouped[0, 2] == -1.0
    assert grouped[1, 1] == 1.0
    assert grouped[4, 4] == 1.0

    with pytest.raises(PartitionTooSmall):
        build_consensus_Q([(1, 1), (1, 1)])
    with pytest.raises(PartitionTooSmall):
        grouped_permutation([(2, 1), (1, 1)])
    print("✅ Symmetric PSD with Laplacian and identity blocks")


def test_validation_names_violations():
    print("\n4️⃣ Testing named violations...")
    assert validate_model(scalar_model()) == []
    assert "A not Hurwitz" in validate_model(scalar_model(A=0.5))
    assert "R not positive definite" in validate_model(scalar_model(R=-1.0))
    assert "Q not positive semidefinite" in validate_model(scalar_model(Q=-1.0))
    assert "non-finite entries in A" in validate_model(scalar_model(A=float("nan")))

    asymmetric = StateSpaceModel(A=-np.eye(2), B=np.eye(2), D=np.eye(2), Q=[[1.0, 0.5], [0.0, 1.0]],
                                 R=np.eye(2), partition=[(1, 1), (1, 1)])
    assert "Q asymmetric" in validate_model(asymmetric)

    near_axis = scalar_model(A=-1e-10)
    assert "A not Hurwitz" in validate_model(near_axis)
    assert validate_model(near_axis, allow_marginal=True) == []
    print("✅ Each invariant is reported by name")


def test_allow_marginal_still_rejects_unstable():
    print("\n5️⃣ Testing the marginal escape hatch...")
    for a in (0.0, 5e-7):
        assert "A not Hurwitz" in validate_model(scalar_model(A=a), allow_marginal=True)

    with tempfile.TemporaryDirectory() as tmp:
        manifest = read_json(FIXTURES / "scalar.json")
        manifest["A"] = [["5e-7"]]
        unstable = Path(tmp) / "unstable.json"
        unstable.write_text(json.dumps(manifest))
        with pytest.raises(ValidationError):
            load_model(unstable, allow_marginal=True)
    print("✅ Eigenvalue +5e-7 is refused even with allow_marginal")


def test_load_errors():
    print("\n6️⃣ Testing load errors...")
    with pytest.raises(ParseError):
        load_model(FIXTURES / "does_not_exist.json")

    with tempfile.TemporaryDirectory() as tmp:
        broken = Path(tmp) / "broken.json"
        broken.write_text("{ not json")
        with pytest.raises(ParseError):
            load_model(broken)

        manifest = read_json(FIXTURES / "scalar.json")
        manifest["R"] = [["-1.0"]]
        bad_r = Path(tmp) / "bad_r.json"
        bad_r.write_text(json.dumps(manifest))
        with pytest.raises(ValidationError) as excinfo:
            load_model(bad_r)
        assert "R not positive definite" in str(excinfo.value)
        # validation can be skipped
        assert load_model(bad_r, validate=False).R[0, 0] == -1.0

        manifest = read_json(FIXTURES / "two_node.json")
        manifest["dims"]["m"] = 3
        bad_dims = Path(tmp) / "bad_dims.json"
        bad_dims.write_text(json.dumps(manifest))
        with pytest.raises(ValidationError):
            load_model(bad_dims)

        manifest = read_json(FIXTURES / "scalar.json")
        del manifest["A"]
        missing = Path(tmp) / "missing.json"
        missing.write_text(json.dumps(manifest))
        with pytest.raises(ParseError):
            load_model(missing)
    print("✅ Missing, malformed and invalid manifests are rejected")


def test_flat_and_numeric_matrices():
    manifest = {
        "name": "flat",
        "partition": [[1, 1], [1, 1]],
        "A": [-1.0, 0.2, 0.0, -2.0],
        "B": [["1.0", "0.0"], ["0.0", "1.0"]],
        "D": [[1.0, 0.0], [0.0, 1.0]],
    }
    model = model_from_manifest(manifest)
    assert np.array_equal(model.A, np.array([[-1.0, 0.2], [0.0, -2.0]]))
    assert np.array_equal(model.Q, np.eye(2))
    assert np.array_equal(model.R, np.eye(2))


def test_manifest_round_trip():
    print("\n7️⃣ Testing manifest round trip...")
    model = random_model(42, [(2, 1), (1, 1), (3, 2)])
    assert is_hurwitz(model.A)
    assert np.array_equal(model.A, random_model(42, [(2, 1), (1, 1), (3, 2)]).A)

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "random.json"
        save_model(model, path, notes="round trip", seed=42)
        loaded = load_model(path)
        assert read_json(path)["seed"] == 42
        regenerated = random_model(read_json(path)["seed"], loaded.partition)
        assert np.array_equal(regenerated.A, loaded.A)
        assert np.array_equal(regenerated.D, loaded.D)
    for name in ("A", "B", "D", "Q", "R"):
        assert np.array_equal(getattr(model, name), getattr(loaded, name))
    assert loaded.partition == model.partition
    assert model_to_manifest(model)["dims"] == {"m": 6, "r": 4, "q": 6, "n": 3}
    print("✅ Decimal strings reproduce every bit")


def test_model_set_manifest():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        for name in ("three_node", "three_node_light"):
            (tmp / f"{name}.json").write_text((FIXTURES / f"{name}.json").read_text())
        write_json_atomic(tmp / "set.json", {"models": ["three_node.json", "three_node_light.json"],
                                             "phi": [0.25, 0.75], "nominal_index": 1})
        model_set = load_model_set(tmp / "set.json")
        assert model_set.size == 2
        assert list(model_set.phi) == [0.25, 0.75]
        assert model_set.nominal.name == "three_node_light"
        assert not list(tmp.glob("*.tmp"))


def test_loss_table_hash_check():
    print("\n8️⃣ Testing table hash check...")
    model = load_model(FIXTURES / "scalar.json")
    table = build_loss_table(model)
    edited = scalar_model(A=-1.5)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "table.json"
        save_loss_table(table, path)
        assert load_loss_table(path, model).model_id == table.model_id
        with pytest.raises(HashMismatch):
            load_loss_table(path, edited)

        data = read_json(path)
        data["version"] = 99
        write_json_atomic(path, data)
        with pytest.raises(ParseError):
            load_loss_table(path)
    print("✅ Edited model is refused")


def main():
    """Run all model I/O tests"""
    print("📂 Testing Model I/O")
    print("=" * 50)

    tests = [
        ("Fixture Loading", test_load_fixtures),
        ("Reordered Manifest", test_reordered_manifest_matches_grouped),
        ("Consensus Weight", test_consensus_weight),
        ("Named Violations", test_validation_names_violations),
        ("Marginal Escape Hatch", test_allow_marginal_still_rejects_unstable),
        ("Load Errors", test_load_errors),
        ("Flat Matrices", test_flat_and_numeric_matrices),
        ("Manifest Round Trip", test_manifest_round_trip),
        ("Model-Set Manifest", test_model_set_manifest),
        ("Table Hash Check", test_loss_table_hash_check),
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
