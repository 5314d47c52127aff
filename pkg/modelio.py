"""
Model and model-set manifests, validation, the consensus weight matrix and
loss-table persistence.

Manifests are JSON with row-major matrices whose entries are full-precision
decimal strings, so a saved model hashes identically on every platform.
"""
import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg

from errors import (
    CbseError,
    DimensionMismatch,
    HashMismatch,
    ParseError,
    PartitionTooSmall,
    ValidationError,
)
from lincontrol import SolverOptions, StateSpaceModel, is_hurwitz, spectral_abscissa
from lossmap import LossTable, model_hash
from robust import ModelSet

logger = logging.getLogger(__name__)

STRICT_HURWITZ_THRESHOLD = 1e-9
MARGINAL_HURWITZ_THRESHOLD = 0.0
SYMMETRY_TOL = 1e-12
ORDERINGS = ("grouped", "reordered")

PathLike = Union[str, Path]


# Consensus weight

def build_consensus_Q(partition: Sequence[Tuple[int, int]]) -> np.ndarray:
    """diag(n I - 1 1^T, I_n, I_{m-2n}) for states ordered angles, frequencies, rest"""
    n = len(partition)
    m = sum(m_i for m_i, _ in partition)
    if m < 2 * n:
        raise PartitionTooSmall(f"{m} states cannot hold {n} angles and {n} frequencies")
    laplacian = n * np.eye(n) - np.ones((n, n))
    return linalg.block_diag(laplacian, np.eye(n), np.eye(m - 2 * n))


def grouped_permutation(partition: Sequence[Tuple[int, int]]) -> np.ndarray:
    """order[j] = grouped position of the j-th state in angles-first ordering.

    In grouped ordering node i holds (angle_i, frequency_i, other states of i)
    contiguously.
    """
    starts = np.cumsum([0] + [m_i for m_i, _ in partition[:-1]])
    for node, (m_i, _) in enumerate(partition, start=1):
        if m_i < 2:
            raise PartitionTooSmall(f"node {node} has {m_i} states; angle and frequency need 2")
    angles = [int(s) for s in starts]
    frequencies = [int(s) + 1 for s in starts]
    others = [int(s) + k for s, (m_i, _) in zip(starts, partition) for k in range(2, m_i)]
    return np.array(angles + frequencies + others, dtype=int)


def consensus_q_grouped(partition: Sequence[Tuple[int, int]]) -> np.ndarray:
    order = grouped_permutation(partition)
    Q = np.empty((order.size, order.size))
    Q[np.ix_(order, order)] = build_consensus_Q(partition)
    return Q


def _to_grouped(order: np.ndarray, A: np.ndarray, B: np.ndarray, D: np.ndarray,
                Q: np.ndarray) -> Tuple[np.ndarray, ...]:
    A_g, Q_g = np.empty_like(A), np.empty_like(Q)
    B_g, D_g = np.empty_like(B), np.empty_like(D)
    A_g[np.ix_(order, order)] = A
    Q_g[np.ix_(order, order)] = Q
    B_g[order, :] = B
    D_g[order, :] = D
    return A_g, B_g, D_g, Q_g


# Validation

def validate_model(model: StateSpaceModel, allow_marginal: bool = False) -> List[str]:
    """Named invariant violations of a model; empty when it is valid"""
    violations = []
    for name in ("A", "B", "D", "Q", "R"):
        if not np.all(np.isfinite(getattr(model, name))):
            violations.append(f"non-finite entries in {name}")
    if violations:
        return violations

    for name, definite in (("Q", False), ("R", True)):
        M = getattr(model, name)
        scale = max(1.0, float(np.max(np.abs(M)))) if M.size else 1.0
        if not np.allclose(M, M.T, rtol=0.0, atol=SYMMETRY_TOL * scale):
            violations.append(f"{name} asymmetric")
            continue
        if M.size == 0:
            continue
        smallest = float(np.min(linalg.eigvalsh(0.5 * (M + M.T))))
        if definite and smallest <= 0.0:
            violations.append(f"{name} not positive definite")
        elif not definite and smallest < -SYMMETRY_TOL * scale * M.shape[0]:
            violations.append(f"{name} not positive semidefinite")

    threshold = MARGINAL_HURWITZ_THRESHOLD if allow_marginal else STRICT_HURWITZ_THRESHOLD
    if not is_hurwitz(model.A, threshold):
        violations.append("A not Hurwitz")
        logger.debug(f"{model.name}: spectral abscissa {spectral_abscissa(model.A):.3e}")
    return violations


def _raise_on_violations(model: StateSpaceModel, allow_marginal: bool) -> StateSpaceModel:
    violations = validate_model(model, allow_marginal)
    if violations:
        raise ValidationError(f"{model.name}: " + "; ".join(violations))
    return model


# Manifests

def read_json(path: PathLike) -> Dict:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError as exc:
        raise ParseError(f"{path} not found") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot parse {path}: {exc}") from exc


def write_json_atomic(path: PathLike, data: Dict):
    """Write-temp-then-rename so readers never see a partial file"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2)
            f.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _matrix(data, name: str, rows: int, cols: int) -> np.ndarray:
    """Row-major matrix from nested rows or a flat list, entries numbers or decimal strings"""
    try:
        values = np.array(data, dtype=object)
        if values.ndim == 1 and values.size == rows * cols:
            values = values.reshape(rows, cols)
        M = values.astype(float)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"matrix {name} is malformed: {exc}") from exc
    if M.shape != (rows, cols):
        raise ValidationError(f"{name} is {M.shape}, declared {(rows, cols)}")
    return M


def _decimal_rows(M: np.ndarray) -> List[List[str]]:
    return [[repr(float(x)) for x in row] for row in M]


def model_from_manifest(manifest: Dict, source: str = "<manifest>") -> StateSpaceModel:
    """Unvalidated model from a manifest dict; structural problems raise ParseError/ValidationError"""
    try:
        name = str(manifest.get("name", source))
        partition = [(int(m_i), int(r_i)) for m_i, r_i in manifest["partition"]]
        dims = manifest.get("dims", {})
        m = int(dims.get("m", sum(p[0] for p in partition)))
        r = int(dims.get("r", sum(p[1] for p in partition)))
        q = int(dims["q"]) if "q" in dims else int(np.array(manifest["D"], dtype=object).reshape(m, -1).shape[1])
        n = int(dims.get("n", len(partition)))
        ordering = manifest.get("ordering", "grouped")
        A_data, B_data, D_data = manifest["A"], manifest["B"], manifest["D"]
        Q_data, R_data = manifest.get("Q", "identity"), manifest.get("R", "identity")
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{source}: manifest is missing or has malformed field {exc}") from exc

    if n != len(partition):
        raise ValidationError(f"{name}: dims.n={n} but partition lists {len(partition)} nodes")
    if ordering not in ORDERINGS:
        raise ValidationError(f"{name}: unknown state ordering {ordering!r}")

    A = _matrix(A_data, "A", m, m)
    B = _matrix(B_data, "B", m, r)
    D = _matrix(D_data, "D", m, q)
    if Q_data == "consensus":
        Q = build_consensus_Q(partition)
    elif Q_data == "identity":
        Q = np.eye(m)
    else:
        Q = _matrix(Q_data, "Q", m, m)
    R = np.eye(r) if R_data == "identity" else _matrix(R_data, "R", r, r)

    if ordering == "reordered":
        A, B, D, Q = _to_grouped(grouped_permutation(partition), A, B, D, Q)
    elif Q_data == "consensus":
        Q = consensus_q_grouped(partition)

    try:
        return StateSpaceModel(A=A, B=B, D=D, Q=Q, R=R, partition=partition, name=name)
    except DimensionMismatch as exc:
        raise ValidationError(f"{name}: {exc}") from exc


def load_model(path: PathLike, allow_marginal: bool = False, validate: bool = True) -> StateSpaceModel:
    path = Path(path)
    model = model_from_manifest(read_json(path), source=path.stem)
    logger.info(f"Loaded model {model.name}: m={model.m} r={model.r} q={model.q} n={model.n}")
    return _raise_on_violations(model, allow_marginal) if validate else model


def load_model_set(path: PathLike, allow_marginal: bool = False) -> ModelSet:
    """Model set whose model paths are relative to the set manifest"""
    path = Path(path)
    manifest = read_json(path)
    try:
        references = list(manifest["models"])
        phi_data = manifest.get("phi", "uniform")
        nominal_index = int(manifest.get("nominal_index", 0))
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}: model-set manifest is missing or has malformed field {exc}") from exc
    if not references:
        raise ValidationError(f"{path}: model set lists no models")

    models = [load_model(path.parent / ref, allow_marginal) for ref in references]
    phi = None if phi_data == "uniform" else [float(p) for p in phi_data]
    model_set = ModelSet(models, phi, nominal_index)
    logger.info(f"Loaded model set {path.name}: {model_set.size} models, nominal {nominal_index}")
    return model_set


def model_to_manifest(model: StateSpaceModel, notes: Optional[str] = None,
                      seed: Optional[int] = None) -> Dict:
    manifest = {
        "name": model.name,
        "dims": {"m": model.m, "r": model.r, "q": model.q, "n": model.n},
        "ordering": "grouped",
        "partition": [list(p) for p in model.partition],
        "A": _decimal_rows(model.A),
        "B": _decimal_rows(model.B),
        "D": _decimal_rows(model.D),
        "Q": _decimal_rows(model.Q),
        "R": _decimal_rows(model.R),
    }
    if seed is not None:
        manifest["seed"] = seed
    if notes:
        manifest["notes"] = notes
    return manifest


def save_model(model: StateSpaceModel, path: PathLike, notes: Optional[str] = None,
               seed: Optional[int] = None):
    write_json_atomic(path, model_to_manifest(model, notes, seed))


def random_model(seed: int, partition: Sequence[Tuple[int, int]], q: Optional[int] = None,
                 margin: float = 0.5) -> StateSpaceModel:
    """Deterministic random model with Hurwitz A (spectral abscissa -margin)"""
    rng = np.random.default_rng(seed)
    partition = [(int(m_i), int(r_i)) for m_i, r_i in partition]
    m = sum(p[0] for p in partition)
    r = sum(p[1] for p in partition)
    q = m if q is None else q
    G = rng.standard_normal((m, m))
    A = G - (spectral_abscissa(G) + margin) * np.eye(m)
    B = rng.standard_normal((m, r))
    D = rng.standard_normal((m, q))
    F = rng.standard_normal((m, m))
    Q = F @ F.T / m + np.eye(m)
    R = np.eye(r)
    return StateSpaceModel(A=A, B=B, D=D, Q=Q, R=R, partition=partition, name=f"random-{seed}")


# Loss tables

def save_loss_table(table: LossTable, path: PathLike):
    write_json_atomic(path, table.to_dict())


def load_loss_table(path: PathLike, model: Optional[StateSpaceModel] = None,
                    options: Optional[SolverOptions] = None) -> LossTable:
    """Load a saved table; with `model` given, its content hash must match"""
    data = read_json(path)
    try:
        table = LossTable.from_dict(data)
    except (CbseError, KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}: malformed loss table: {exc}") from exc
    if model is not None:
        expected = model_hash(model, table.mode, options)
        if table.model_id != expected:
            raise HashMismatch(f"{path} was computed for model {table.model_id[:12]}, "
                               f"{model.name} hashes to {expected[:12]}")
    return table
