"""
Attack-outcome sparsity patterns and the H2-performance loss table.
Each of the 2^n patterns gets a structured synthesis; the loss is its cost
increase over the unstructured optimum.
"""
import hashlib
import json
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed

from errors import CapExceeded, DimensionMismatch, NumericalError, WeightSumMismatch
from lincontrol import (
    LinkMode,
    SolverOptions,
    StateSpaceModel,
    build_mask,
    h2_cost,
    synth_structured,
    synth_unstructured,
)

logger = logging.getLogger(__name__)

DEFAULT_PATTERN_CAP = 16
WEIGHT_SUM_TOL = 1e-12
NEGATIVE_LOSS_TOL = 1e-9
LOSS_TABLE_VERSION = 1


@dataclass(frozen=True)
class SparsityPattern:
    """Binary n-tuple of attack outcomes: 0 = communication disabled, 1 = survives.

    Node k (1-based) is bit k-1 of the index, so index 0 is the all-attacked
    pattern and index 2^n - 1 the intact network.
    """
    bits: Tuple[int, ...]

    @property
    def n(self) -> int:
        return len(self.bits)

    @property
    def index(self) -> int:
        return sum(bit << k for k, bit in enumerate(self.bits))

    @classmethod
    def from_index(cls, index: int, n: int) -> "SparsityPattern":
        if not 0 <= index < (1 << n):
            raise DimensionMismatch(f"pattern index {index} outside [0, {(1 << n) - 1}]")
        return cls(tuple((index >> k) & 1 for k in range(n)))

    @classmethod
    def all_ones(cls, n: int) -> "SparsityPattern":
        return cls((1,) * n)

    @classmethod
    def all_attacked(cls, n: int) -> "SparsityPattern":
        return cls((0,) * n)

    @classmethod
    def single_node(cls, n: int, node: int) -> "SparsityPattern":
        """Only `node` (1-based) attacked successfully"""
        return cls(tuple(0 if k == node - 1 else 1 for k in range(n)))

    def __str__(self) -> str:
        return "".join(str(b) for b in self.bits)


@dataclass(eq=False)
class LossTable:
    """Per-pattern optimal structured cost and loss over the unstructured optimum"""
    model_id: str
    mode: str
    n: int
    J_opt: float
    J_by_pattern: np.ndarray
    delta_by_pattern: np.ndarray
    convergence_flags: np.ndarray

    def __post_init__(self):
        self.mode = LinkMode(self.mode).value
        self.J_by_pattern = np.asarray(self.J_by_pattern, dtype=float)
        self.delta_by_pattern = np.asarray(self.delta_by_pattern, dtype=float)
        self.convergence_flags = np.asarray(self.convergence_flags, dtype=bool)
        size = 1 << self.n
        for name in ("J_by_pattern", "delta_by_pattern", "convergence_flags"):
            if getattr(self, name).shape != (size,):
                raise DimensionMismatch(f"{name} must hold {size} entries")

    @property
    def J_ol(self) -> float:
        return float(self.J_by_pattern[0])

    @property
    def open_loop_delta(self) -> float:
        return float(self.delta_by_pattern[0])

    def single_node_delta(self, node: int) -> float:
        return float(self.delta_by_pattern[SparsityPattern.single_node(self.n, node).index])

    def flagged_patterns(self) -> List[int]:
        return [int(i) for i in np.flatnonzero(~self.convergence_flags)]

    def to_dict(self) -> Dict:
        return {
            "version": LOSS_TABLE_VERSION,
            "model_hash": self.model_id,
            "mode": self.mode,
            "n": self.n,
            "J_opt": float(self.J_opt),
            "entries": [
                {
                    "index": index,
                    "J": float(self.J_by_pattern[index]),
                    "delta": float(self.delta_by_pattern[index]),
                    "converged": bool(self.convergence_flags[index]),
                }
                for index in range(1 << self.n)
            ],
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "LossTable":
        """Inverse of to_dict; raises KeyError/ValueError on malformed input"""
        if data.get("version") != LOSS_TABLE_VERSION:
            raise ValueError(f"unsupported loss table version {data.get('version')!r}")
        n = int(data["n"])
        entries = sorted(data["entries"], key=lambda e: int(e["index"]))
        if [int(e["index"]) for e in entries] != list(range(1 << n)):
            raise ValueError(f"loss table must list pattern indices 0..{(1 << n) - 1}")
        return cls(
            model_id=str(data["model_hash"]),
            mode=data["mode"],
            n=n,
            J_opt=float(data["J_opt"]),
            J_by_pattern=np.array([float(e["J"]) for e in entries]),
            delta_by_pattern=np.array([float(e["delta"]) for e in entries]),
            convergence_flags=np.array([bool(e["converged"]) for e in entries]),
        )


def _matrix_repr(M: np.ndarray) -> List[List[str]]:
    return [[repr(float(x)) for x in row] for row in np.atleast_2d(M)]


def model_hash(model: StateSpaceModel, mode: Union[LinkMode, str],
               options: Optional[SolverOptions] = None) -> str:
    """sha256 over the canonical serialization of everything the table depends on"""
    options = options or SolverOptions()
    canonical = {
        "A": _matrix_repr(model.A),
        "B": _matrix_repr(model.B),
        "D": _matrix_repr(model.D),
        "Q": _matrix_repr(model.Q),
        "R": _matrix_repr(model.R),
        "partition": [list(p) for p in model.partition],
        "mode": LinkMode(mode).value,
        "options": {k: repr(v) for k, v in options.to_dict().items()},
    }
    payload = json.dumps(canonical, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def enumerate_patterns(n: int, cap: int = DEFAULT_PATTERN_CAP) -> List[SparsityPattern]:
    """All 2^n patterns in index order"""
    if n < 1:
        raise DimensionMismatch(f"node count must be at least 1, got {n}")
    if n > cap:
        raise CapExceeded(f"{n} nodes need 2^{n} syntheses; pattern cap is {cap}")
    return [SparsityPattern.from_index(index, n) for index in range(1 << n)]


def _clamped_loss(J_s: float, J_opt: float, pattern: SparsityPattern) -> float:
    delta = J_s - J_opt
    if delta < -NEGATIVE_LOSS_TOL * abs(J_opt):
        logger.warning(f"Pattern {pattern} beats the unstructured optimum by {-delta:.3e}; "
                       f"clamping loss to 0")
    return max(delta, 0.0)


def _synthesize_pattern(model: StateSpaceModel, pattern: SparsityPattern, mode: str,
                        options: SolverOptions) -> Tuple[float, bool]:
    """Structured optimum for one pattern.

    A synthesis that fails after accepting steps comes back unconverged with its
    best J; one that fails before any step falls back to K = 0. Both are flagged.
    """
    mask = build_mask(pattern, model.partition, mode)
    try:
        report = synth_structured(model, mask, options)
    except NumericalError as exc:
        logger.warning(f"Synthesis failed for pattern {pattern} of {model.name}: {exc}")
        return h2_cost(model, np.zeros((model.r, model.m)), options), False
    return report.J, report.converged


def loss_for_pattern(model: StateSpaceModel, pattern: SparsityPattern,
                     mode: Union[LinkMode, str] = LinkMode.FULL_NODE,
                     options: Optional[SolverOptions] = None,
                     J_opt: Optional[float] = None) -> Tuple[float, float, bool]:
    """(J_s, delta, converged) for a single sparsity pattern"""
    options = options or SolverOptions()
    mode = LinkMode(mode).value
    if J_opt is None:
        J_opt = synth_unstructured(model, options).J
    J_s, converged = _synthesize_pattern(model, pattern, mode, options)
    return J_s, _clamped_loss(J_s, J_opt, pattern), converged


def build_loss_table(model: StateSpaceModel,
                     mode: Union[LinkMode, str] = LinkMode.FULL_NODE,
                     options: Optional[SolverOptions] = None,
                     pattern_cap: int = DEFAULT_PATTERN_CAP,
                     jobs: int = 1,
                     cache=None) -> LossTable:
    """All 2^n losses of a model, computed as a parallel map over patterns.

    `cache` is an optional LossTableCache consulted before and filled after
    the computation.
    """
    options = options or SolverOptions()
    mode = LinkMode(mode).value
    patterns = enumerate_patterns(model.n, pattern_cap)

    if cache is not None:
        cached = cache.get_cached_table(model, mode, options)
        if cached is not None:
            return cached

    optimum = synth_unstructured(model, options)
    J_opt = optimum.J
    full_index = len(patterns) - 1

    logger.info(f"Building {mode} loss table for {model.name}: {len(patterns)} patterns, "
                f"J_opt={J_opt:.6g}, jobs={jobs}")
    results = Parallel(n_jobs=jobs)(
        delayed(_synthesize_pattern)(model, pattern, mode, options)
        for pattern in patterns[:full_index]
    )

    J_by_pattern = np.empty(len(patterns))
    delta_by_pattern = np.empty(len(patterns))
    flags = np.empty(len(patterns), dtype=bool)
    for pattern, (J_s, converged) in zip(patterns[:full_index], results):
        J_by_pattern[pattern.index] = J_s
        delta_by_pattern[pattern.index] = _clamped_loss(J_s, J_opt, pattern)
        flags[pattern.index] = converged
    J_by_pattern[full_index] = J_opt
    delta_by_pattern[full_index] = 0.0
    flags[full_index] = optimum.converged

    table = LossTable(
        model_id=model_hash(model, mode, options),
        mode=mode,
        n=model.n,
        J_opt=J_opt,
        J_by_pattern=J_by_pattern,
        delta_by_pattern=delta_by_pattern,
        convergence_flags=flags,
    )
    flagged = table.flagged_patterns()
    if flagged:
        logger.warning(f"{len(flagged)} of {len(patterns)} patterns did not converge for {model.name}")
    logger.info(f"Loss table for {model.name} done: open-loop loss {table.open_loop_delta:.6g}")

    if cache is not None:
        cache.cache_table(table)
    return table


def importance_ranking(table: LossTable) -> List[int]:
    """Nodes (1-based) by descending single-attack loss, ties by node index"""
    nodes = range(1, table.n + 1)
    return sorted(nodes, key=lambda k: (-table.single_node_delta(k), k))


def fraction_percent(value: float, J_opt: float) -> float:
    """value / J_opt in percent; 0 when both vanish"""
    if J_opt == 0.0:
        return 0.0 if value == 0.0 else math.inf
    return 100.0 * value / J_opt


def fractional_losses(table: LossTable) -> Dict:
    """Single-attack and open-loop fractional losses, in ranking order"""
    rows = []
    for rank, node in enumerate(importance_ranking(table), start=1):
        delta = table.single_node_delta(node)
        rows.append({
            "rank": rank,
            "node": node,
            "delta": delta,
            "fractional_loss_pct": fraction_percent(delta, table.J_opt),
        })
    return {
        "nodes": rows,
        "open_loop": {
            "delta": table.open_loop_delta,
            "fractional_loss_pct": fraction_percent(table.open_loop_delta, table.J_opt),
        },
    }


def check_weights(phi: Sequence[float], count: int) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    if phi.shape != (count,):
        raise DimensionMismatch(f"{phi.size} weights for {count} models")
    if np.any(phi < 0.0):
        raise WeightSumMismatch("model probabilities must be non-negative")
    total = math.fsum(phi)
    if abs(total - 1.0) > WEIGHT_SUM_TOL:
        raise WeightSumMismatch(f"model probabilities sum to {total!r}, expected 1")
    return phi


def combine_loss_tables(tables: Sequence[LossTable], phi: Sequence[float]) -> LossTable:
    """Probability-weighted loss table: delta = sum_j phi_j delta^j per pattern"""
    if not tables:
        raise DimensionMismatch("no loss tables to combine")
    phi = check_weights(phi, len(tables))
    n, mode = tables[0].n, tables[0].mode
    for table in tables[1:]:
        if table.n != n or table.mode != mode:
            raise DimensionMismatch("loss tables disagree on node count or link mode")

    delta = phi[0] * tables[0].delta_by_pattern
    J_s = phi[0] * tables[0].J_by_pattern
    J_opt = phi[0] * tables[0].J_opt
    for weight, table in zip(phi[1:], tables[1:]):
        delta = delta + weight * table.delta_by_pattern
        J_s = J_s + weight * table.J_by_pattern
        J_opt = J_opt + weight * table.J_opt
    flags = np.logical_and.reduce([table.convergence_flags for table in tables])

    digest = hashlib.sha256()
    for weight, table in zip(phi, tables):
        digest.update(f"{table.model_id}:{weight!r};".encode("utf-8"))
    return LossTable(
        model_id=digest.hexdigest(),
        mode=mode,
        n=n,
        J_opt=float(J_opt),
        J_by_pattern=J_s,
        delta_by_pattern=delta,
        convergence_flags=flags,
    )


def expected_loss_table(model_set, mode: Union[LinkMode, str] = LinkMode.FULL_NODE,
                        options: Optional[SolverOptions] = None,
                        pattern_cap: int = DEFAULT_PATTERN_CAP,
                        jobs: int = 1,
                        cache=None) -> LossTable:
    """Expected loss over a model set (anything with `models` and `phi`)"""
    check_weights(model_set.phi, len(model_set.models))
    tables = [
        build_loss_table(model, mode, options, pattern_cap, jobs, cache)
        for model in model_set.models
    ]
    return combine_loss_tables(tables, model_set.phi)
