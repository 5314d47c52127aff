"""
Security games over a set of uncertain system models.

Two designs are compared with the ideal game of each model: the nominal-model
game (CBSE of one designated model applied to every model) and the
average-payoff game (CBSE of the probability-weighted loss table).
"""
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import CbseError, DegenerateDenominator, DimensionMismatch, ValidationError
from game import Action, CbseResult, GameConfig, payoff_attacker, solve_cbbi
from lincontrol import LinkMode, SolverOptions, StateSpaceModel, h2_cost, synth_unstructured
from lossmap import (
    DEFAULT_PATTERN_CAP,
    LossTable,
    build_loss_table,
    check_weights,
    combine_loss_tables,
    fraction_percent,
)

module_logger = logging.getLogger(__name__)

SHARED_MATRIX_RTOL = 1e-9
DEGENERATE_PAYOFF = 1e-12


@dataclass
class ModelSet:
    """Uncertain models sharing node count and the B, D matrices"""
    models: List[StateSpaceModel]
    phi: np.ndarray = None
    nominal_index: int = 0

    def __post_init__(self):
        if not self.models:
            raise ValidationError("model set is empty")
        count = len(self.models)
        if self.phi is None:
            self.phi = np.full(count, 1.0 / count)
        self.phi = check_weights(self.phi, count)
        if not 0 <= self.nominal_index < count:
            raise ValidationError(f"nominal index {self.nominal_index} outside [0, {count - 1}]")

        first = self.models[0]
        for index, model in enumerate(self.models[1:], start=1):
            if model.n != first.n or model.A.shape != first.A.shape or model.B.shape != first.B.shape:
                raise ValidationError(f"model {index} dimensions differ from model 0")
            for name in ("B", "D"):
                mine, theirs = getattr(model, name), getattr(first, name)
                if mine.shape != theirs.shape or not np.allclose(mine, theirs, rtol=SHARED_MATRIX_RTOL, atol=0.0):
                    raise ValidationError(f"{name} of model {index} differs from model 0")

    @property
    def size(self) -> int:
        return len(self.models)

    @property
    def nominal(self) -> StateSpaceModel:
        return self.models[self.nominal_index]


@dataclass
class MismatchStats:
    """Mismatch percentages of one game design and their boxplot summary"""
    values: List[float] = field(default_factory=list)
    degenerate: int = 0

    def add(self, value: float):
        self.values.append(float(value))

    def summary(self) -> Dict:
        if not self.values:
            return {"count": 0, "degenerate": self.degenerate}
        data = np.sort(np.asarray(self.values))
        q1, median, q3 = np.percentile(data, [25.0, 50.0, 75.0])
        return {
            "count": int(data.size),
            "degenerate": self.degenerate,
            "min": float(data[0]),
            "q1": float(q1),
            "median": float(median),
            "q3": float(q3),
            "max": float(data[-1]),
            "mean": float(data.mean()),
        }

    def to_dict(self) -> Dict:
        return {"values": sorted(self.values), "summary": self.summary()}


def evaluate_strategy(pair: Tuple[Action, Action], table_i: LossTable) -> float:
    """Attacker payoff of a fixed strategy pair under another model's losses"""
    a, d = pair
    return payoff_attacker(a, d, table_i)


def _config_key(config: GameConfig) -> str:
    return json.dumps(config.to_dict(), sort_keys=True)


def _mismatch(evaluated: float, ideal: float, model_index: int) -> float:
    if abs(ideal) <= DEGENERATE_PAYOFF:
        raise DegenerateDenominator(model_index)
    return abs(evaluated - ideal) / abs(ideal) * 100.0


class RobustGameSolver:
    """Ideal, nominal-model and average-payoff games over a fixed set of loss tables.

    Tables are built once; CBSEs are memoized per (model, game configuration),
    so sweeping cost pairs reuses every table.
    """

    def __init__(self, tables: Sequence[LossTable], phi: Optional[Sequence[float]] = None,
                 nominal_index: int = 0, jobs: int = 1, models: Optional[Sequence[StateSpaceModel]] = None,
                 logger: Optional[logging.Logger] = None):
        if not tables:
            raise ValidationError("no loss tables")
        self.tables = list(tables)
        count = len(self.tables)
        self.phi = check_weights(np.full(count, 1.0 / count) if phi is None else phi, count)
        if not 0 <= nominal_index < count:
            raise ValidationError(f"nominal index {nominal_index} outside [0, {count - 1}]")
        self.nominal_index = nominal_index
        self.jobs = jobs
        self.models = list(models) if models is not None else None
        self.logger = logger or module_logger
        self.average_table = combine_loss_tables(self.tables, self.phi)
        self._cbse: Dict[Tuple[object, str], CbseResult] = {}

    @classmethod
    def from_model_set(cls, model_set: ModelSet, mode: Union[LinkMode, str] = LinkMode.FULL_NODE,
                       options: Optional[SolverOptions] = None, pattern_cap: int = DEFAULT_PATTERN_CAP,
                       jobs: int = 1, cache=None, logger: Optional[logging.Logger] = None) -> "RobustGameSolver":
        tables = [build_loss_table(model, mode, options, pattern_cap, jobs, cache) for model in model_set.models]
        return cls(tables, model_set.phi, model_set.nominal_index, jobs, model_set.models, logger)

    @property
    def size(self) -> int:
        return len(self.tables)

    def _solve(self, key: object, table: LossTable, config: GameConfig) -> CbseResult:
        memo_key = (key, _config_key(config))
        if memo_key not in self._cbse:
            self._cbse[memo_key] = solve_cbbi(config, table, self.jobs)
        return self._cbse[memo_key]

    def ideal_cbse(self, i: int, config: GameConfig) -> CbseResult:
        """CBSE of the game designed for model i"""
        return self._solve(i, self.tables[i], config)

    def nominal_cbse(self, config: GameConfig) -> CbseResult:
        return self.ideal_cbse(self.nominal_index, config)

    def average_cbse(self, config: GameConfig) -> CbseResult:
        return self._solve("average", self.average_table, config)

    def evaluate(self, result: CbseResult, i: int) -> float:
        return evaluate_strategy((result.a_star, result.d_star), self.tables[i])

    def nominal_mismatch(self, i: int, config: GameConfig) -> float:
        ideal = self.ideal_cbse(i, config)
        return _mismatch(self.evaluate(self.nominal_cbse(config), i), self.evaluate(ideal, i), i)

    def average_mismatch(self, i: int, config: GameConfig) -> float:
        ideal = self.ideal_cbse(i, config)
        return _mismatch(self.evaluate(self.average_cbse(config), i), self.evaluate(ideal, i), i)

    def compare_games(self, i: int, config: GameConfig) -> Dict:
        """Ideal, nominal and average fractional payoffs on model i, with both mismatches"""
        table = self.tables[i]
        ideal = self.evaluate(self.ideal_cbse(i, config), i)
        nominal = self.evaluate(self.nominal_cbse(config), i)
        average = self.evaluate(self.average_cbse(config), i)
        row = {
            "model": i,
            "ideal_payoff": ideal,
            "nominal_payoff": nominal,
            "average_payoff": average,
            "ideal_fractional_pct": fraction_percent(ideal, table.J_opt),
            "nominal_fractional_pct": fraction_percent(nominal, table.J_opt),
            "average_fractional_pct": fraction_percent(average, table.J_opt),
            "mu_nominal_pct": None,
            "mu_average_pct": None,
            "degenerate": False,
        }
        try:
            row["mu_nominal_pct"] = _mismatch(nominal, ideal, i)
            row["mu_average_pct"] = _mismatch(average, ideal, i)
        except DegenerateDenominator:
            row["degenerate"] = True
        return row

    def iter_mismatch_rows(self, cost_grid: Sequence[Tuple[float, float]], config: GameConfig) -> Iterator[Dict]:
        """compare_games for every model and cost pair; failing points carry the error"""
        for gamma_a, gamma_d in cost_grid:
            point = config.with_costs(gamma_a, gamma_d)
            for i in range(self.size):
                try:
                    row = self.compare_games(i, point)
                    row["error"] = ""
                except CbseError as exc:
                    self.logger.warning(f"Robust point model={i} gamma_a={gamma_a} gamma_d={gamma_d} failed: {exc}")
                    row = {"model": i, "degenerate": False, "error": f"{type(exc).__name__}: {exc}"}
                row.update(gamma_a=float(gamma_a), gamma_d=float(gamma_d))
                yield row

    def mismatch_statistics(self, cost_grid: Sequence[Tuple[float, float]],
                            config: GameConfig) -> Tuple[MismatchStats, MismatchStats]:
        """Nominal and average mismatch over all models and cost pairs, cost pairs weighted uniformly"""
        if not cost_grid:
            raise ValidationError("cost grid is empty")
        nominal, average = MismatchStats(), MismatchStats()
        for row in self.iter_mismatch_rows(cost_grid, config):
            if row["error"]:
                continue
            if row["degenerate"]:
                nominal.degenerate += 1
                average.degenerate += 1
                continue
            nominal.add(row["mu_nominal_pct"])
            average.add(row["mu_average_pct"])
        if nominal.degenerate:
            self.logger.warning(f"{nominal.degenerate} (model, cost pair) points have a zero ideal payoff; "
                                f"their mismatch is undefined and skipped")
        return nominal, average

    def per_model_sweep(self, config: GameConfig, gd_grid: Sequence[float]) -> Iterator[Dict]:
        """Each model's ideal fractional payoff along gamma_d at the configured gamma_a"""
        gamma_a = float(config.gamma_a[0])
        for gamma_d in gd_grid:
            point = config.with_costs(gamma_a, gamma_d)
            for i, table in enumerate(self.tables):
                result = self.ideal_cbse(i, point)
                yield {
                    "model": i,
                    "gamma_a": gamma_a,
                    "gamma_d": float(gamma_d),
                    "ideal_fractional_pct": result.fractional_payoff(table.J_opt),
                    "a_star": " ".join(str(s) for s in result.a_star.steps),
                    "d_star": " ".join(str(s) for s in result.d_star.steps),
                }

    def controller_mismatch(self, i: int, options: Optional[SolverOptions] = None) -> float:
        """Relative H2 penalty on model i of the controller designed for the nominal model"""
        if self.models is None:
            raise ValidationError("controller mismatch needs the models, not only their loss tables")
        return controller_mismatch(ModelSet(self.models, self.phi, self.nominal_index), i, options)


ModelsOrSolver = Union[ModelSet, RobustGameSolver]


def _solver(games: ModelsOrSolver, **kwargs) -> RobustGameSolver:
    if isinstance(games, RobustGameSolver):
        return games
    return RobustGameSolver.from_model_set(games, **kwargs)


def nominal_mismatch(games: ModelsOrSolver, config: GameConfig, i: int, **kwargs) -> float:
    return _solver(games, **kwargs).nominal_mismatch(i, config)


def average_mismatch(games: ModelsOrSolver, config: GameConfig, i: int, **kwargs) -> float:
    return _solver(games, **kwargs).average_mismatch(i, config)


def solve_average_game(games: ModelsOrSolver, config: GameConfig, **kwargs) -> CbseResult:
    """CBSE of the game over the expected loss table; actions and budgets unchanged"""
    return _solver(games, **kwargs).average_cbse(config)


def mismatch_statistics(games: ModelsOrSolver, cost_grid: Sequence[Tuple[float, float]],
                        config: GameConfig, **kwargs) -> Tuple[MismatchStats, MismatchStats]:
    return _solver(games, **kwargs).mismatch_statistics(cost_grid, config)


def controller_mismatch(model_set: ModelSet, i: int, options: Optional[SolverOptions] = None) -> float:
    """(J_i(K_nom) - J_i(K_i)) / J_i(K_i) in percent, both gains unstructured optima.

    Raises NotHurwitz when the nominal gain destabilizes model i.
    """
    if not 0 <= i < model_set.size:
        raise DimensionMismatch(f"model index {i} outside [0, {model_set.size - 1}]")
    K_nominal = synth_unstructured(model_set.nominal, options).K
    own = synth_unstructured(model_set.models[i], options).J
    mismatched = h2_cost(model_set.models[i], K_nominal, options)
    return fraction_percent(mismatched - own, own)
