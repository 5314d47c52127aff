"""
Discrete-action attacker/defender Stackelberg game over a loss table.

The defender leads, the attacker best-responds. Payoff ties among best
responses are broken by minimum investment cost and then by enumeration
order, which gives the cost-based Stackelberg equilibrium (CBSE).
"""
import itertools
import logging
from dataclasses import dataclass, replace
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, cpu_count, delayed

from errors import CapExceeded, CbseError, DimensionMismatch, GridCapExceeded, ValidationError
from lossmap import LossTable, SparsityPattern, fraction_percent

logger = logging.getLogger(__name__)

BUDGET = 1.0
BUDGET_SLACK = 1e-12
TIE_FLOOR = 1e-12
DEFAULT_ACTION_CAP = 2 ** 24
DEFAULT_PAIR_CAP = 10 ** 7


@dataclass(frozen=True)
class Action:
    """Per-node investment levels steps/L with their total cost"""
    steps: Tuple[int, ...]
    L: int
    cost: float

    @property
    def levels(self) -> np.ndarray:
        return np.asarray(self.steps, dtype=float) / self.L

    @property
    def n(self) -> int:
        return len(self.steps)

    def is_zero(self) -> bool:
        return not any(self.steps)

    def to_dict(self) -> Dict:
        return {"levels": [float(x) for x in self.levels], "steps": list(self.steps), "L": self.L,
                "cost": float(self.cost)}

    def __str__(self) -> str:
        return "(" + ", ".join(f"{s}/{self.L}" if s not in (0, self.L) else str(s // self.L)
                               for s in self.steps) + ")"


def make_action(steps: Sequence[int], L: int, gamma: Sequence[float]) -> Action:
    """Action from integer steps, costed the same way enumerate_actions costs it"""
    cost = 0.0
    for g, s in zip(gamma, steps):
        cost += float(g) * (s / L)
    return Action(tuple(int(s) for s in steps), int(L), cost)


@dataclass
class GameConfig:
    """Level counts, per-node costs at full effort and tie tolerances of one game"""
    n: int
    L_a: int
    L_d: int
    gamma_a: np.ndarray
    gamma_d: np.ndarray
    payoff_tie_tol: float = 1e-8
    cost_tie_tol: float = 1e-12
    action_cap: int = DEFAULT_ACTION_CAP
    pair_cap: int = DEFAULT_PAIR_CAP

    def __post_init__(self):
        self.gamma_a = np.atleast_1d(np.asarray(self.gamma_a, dtype=float))
        self.gamma_d = np.atleast_1d(np.asarray(self.gamma_d, dtype=float))
        if self.n < 1:
            raise ValidationError(f"node count must be positive, got {self.n}")
        for name in ("L_a", "L_d"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"{name} must be a positive integer")
            setattr(self, name, int(getattr(self, name)))
        for name in ("gamma_a", "gamma_d"):
            gamma = getattr(self, name)
            if gamma.shape != (self.n,):
                raise DimensionMismatch(f"{name} has {gamma.size} entries for {self.n} nodes")
            if not np.all(np.isfinite(gamma)) or np.any(gamma <= 0.0):
                raise ValidationError(f"{name} must be positive")

    @classmethod
    def uniform(cls, n: int, L_a: int, L_d: int, gamma_a: float, gamma_d: float, **kwargs) -> "GameConfig":
        """Every node of a player has the same cost"""
        return cls(n, L_a, L_d, np.full(n, float(gamma_a)), np.full(n, float(gamma_d)), **kwargs)

    def with_costs(self, gamma_a: float, gamma_d: float) -> "GameConfig":
        return replace(self, gamma_a=np.full(self.n, float(gamma_a)), gamma_d=np.full(self.n, float(gamma_d)))

    def with_levels(self, L_a: int, L_d: int) -> "GameConfig":
        return replace(self, L_a=L_a, L_d=L_d)

    def to_dict(self) -> Dict:
        return {
            "n": self.n,
            "L_a": self.L_a,
            "L_d": self.L_d,
            "gamma_a": [float(g) for g in self.gamma_a],
            "gamma_d": [float(g) for g in self.gamma_d],
            "payoff_tie_tol": self.payoff_tie_tol,
            "cost_tie_tol": self.cost_tie_tol,
        }


@dataclass
class CbseResult:
    a_star: Action
    d_star: Action
    attacker_payoff: float
    defender_payoff: float
    attacker_cost: float
    defender_cost: float
    num_attacker_ties: int
    num_defender_ties: int
    used_nonconverged_losses: bool = False

    def fractional_payoff(self, J_opt: float) -> float:
        return fraction_percent(self.attacker_payoff, J_opt)

    def to_dict(self, J_opt: Optional[float] = None) -> Dict:
        data = {
            "a_star": self.a_star.to_dict(),
            "d_star": self.d_star.to_dict(),
            "attacker_payoff": self.attacker_payoff,
            "defender_payoff": self.defender_payoff,
            "attacker_cost": self.attacker_cost,
            "defender_cost": self.defender_cost,
            "num_attacker_ties": self.num_attacker_ties,
            "num_defender_ties": self.num_defender_ties,
            "used_nonconverged_losses": self.used_nonconverged_losses,
        }
        if J_opt is not None:
            data["J_opt"] = J_opt
            data["fractional_payoff_pct"] = self.fractional_payoff(J_opt)
        return data


@dataclass
class IoResult:
    """Individual-optimization baseline and how it fares against the CBSE"""
    a_io: Action
    d_io: Action
    realized_payoff: float
    defender_payoff_vs_best_response: float
    attacker_payoff_vs_cbse_defense: float
    cbse: CbseResult

    @property
    def attacker_cost(self) -> float:
        return self.a_io.cost

    @property
    def defender_cost(self) -> float:
        return self.d_io.cost

    def to_dict(self, J_opt: Optional[float] = None) -> Dict:
        data = {
            "a_io": self.a_io.to_dict(),
            "d_io": self.d_io.to_dict(),
            "realized_payoff": self.realized_payoff,
            "attacker_cost": self.attacker_cost,
            "defender_cost": self.defender_cost,
            "defender_payoff_vs_best_response": self.defender_payoff_vs_best_response,
            "attacker_payoff_vs_cbse_defense": self.attacker_payoff_vs_cbse_defense,
            "cbse_defender_payoff": self.cbse.defender_payoff,
            "defender_payoff_gap": self.cbse.defender_payoff - self.defender_payoff_vs_best_response,
            "cbse": self.cbse.to_dict(J_opt),
        }
        if J_opt is not None:
            data["realized_fractional_payoff_pct"] = fraction_percent(self.realized_payoff, J_opt)
        return data


# Actions and probabilities

def enumerate_actions(n: int, L: int, gamma: Sequence[float], cap: int = DEFAULT_ACTION_CAP) -> List[Action]:
    """Budget-feasible level vectors in lexicographic order, node 1 slowest.

    Prefixes whose cost already exceeds the budget are pruned.
    """
    gamma = np.asarray(gamma, dtype=float)
    if L < 1:
        raise ValidationError(f"level parameter must be at least 1, got {L}")
    if gamma.shape != (n,):
        raise DimensionMismatch(f"{gamma.size} costs for {n} nodes")
    if np.any(gamma <= 0.0):
        raise ValidationError("node costs must be positive")

    limit = BUDGET + BUDGET_SLACK
    actions: List[Action] = []
    steps = [0] * n

    def extend(node: int, cost: float):
        if node == n:
            if len(actions) >= cap:
                raise GridCapExceeded(f"more than {cap} feasible actions (n={n}, L={L})")
            actions.append(Action(tuple(steps), L, cost))
            return
        for level in range(L + 1):
            next_cost = cost + float(gamma[node]) * (level / L)
            if next_cost > limit:
                break
            steps[node] = level
            extend(node + 1, next_cost)
        steps[node] = 0

    extend(0, 0.0)
    return actions


def prob_success(a_k: float, d_k: float) -> float:
    return a_k * (1.0 - d_k)


def pattern_prob(a: Action, d: Action, s: SparsityPattern) -> float:
    if not a.n == d.n == s.n:
        raise DimensionMismatch("action and pattern dimensions disagree")
    prob = 1.0
    for a_k, d_k, bit in zip(a.levels, d.levels, s.bits):
        p_k = prob_success(a_k, d_k)
        prob *= (1.0 - p_k) if bit else p_k
    return prob


# Payoffs

def _loss_tensor(table: LossTable) -> np.ndarray:
    # axis k is the bit of node k+1
    return table.delta_by_pattern.reshape((2,) * table.n, order="F")


def _contract(tensor: np.ndarray, success_probs: Sequence[np.ndarray]) -> np.ndarray:
    """Expected loss for every combination of per-node success probabilities.

    success_probs[k] lists the candidate P_k of node k; the result has one axis
    per node, in node order.
    """
    out = tensor
    for probs in success_probs:
        probs = np.asarray(probs, dtype=float)
        weights = np.stack([probs, 1.0 - probs], axis=1)
        out = np.tensordot(out, weights, axes=([0], [1]))
    return out


def _check_dims(n: int, table: LossTable):
    if table.n != n:
        raise DimensionMismatch(f"loss table has {table.n} nodes, game has {n}")


def payoff_attacker(a: Action, d: Action, table: LossTable) -> float:
    """Expected loss over all patterns; the defender's payoff is its negation"""
    _check_dims(a.n, table)
    success = [np.array([prob_success(a_k, d_k)]) for a_k, d_k in zip(a.levels, d.levels)]
    return float(_contract(_loss_tensor(table), success).reshape(-1)[0])


def attacker_payoff_grid(d: Action, L_a: int, table: LossTable) -> np.ndarray:
    """Attacker payoff for every level vector on the (L_a+1)^n grid against d"""
    _check_dims(d.n, table)
    grid = np.arange(L_a + 1) / L_a
    return _contract(_loss_tensor(table), [grid * (1.0 - d_k) for d_k in d.levels])


def defender_payoff_grid(a: Action, L_d: int, table: LossTable) -> np.ndarray:
    """Defender payoff for every level vector on the (L_d+1)^n grid against a"""
    _check_dims(a.n, table)
    grid = np.arange(L_d + 1) / L_d
    return -_contract(_loss_tensor(table), [a_k * (1.0 - grid) for a_k in a.levels])


def payoff_matrix(actions_a: Sequence[Action], actions_d: Sequence[Action], table: LossTable) -> np.ndarray:
    """Attacker payoffs U[i, j] for actions_a[i] against actions_d[j], pattern by pattern"""
    bits = np.array([SparsityPattern.from_index(m, table.n).bits for m in range(1 << table.n)])
    A = np.array([a.levels for a in actions_a])
    U = np.empty((len(actions_a), len(actions_d)))
    for j, d in enumerate(actions_d):
        P = A * (1.0 - d.levels)
        probs = np.prod(np.where(bits[None, :, :] == 0, P[:, None, :], 1.0 - P[:, None, :]), axis=2)
        U[:, j] = probs @ table.delta_by_pattern
    return U


# Tie handling

def _attacker_threshold(best: float, tol: float) -> float:
    return best * (1.0 - tol) - tol * abs(best) - TIE_FLOOR


def _defender_threshold(best: float, tol: float) -> float:
    # mirror of _attacker_threshold for the minimized attacker payoff
    return best * (1.0 + tol) + tol * abs(best) + TIE_FLOOR


def _pick_cheapest(candidates: np.ndarray, costs: np.ndarray, cost_tol: float) -> int:
    """First candidate (enumeration order) whose cost is within cost_tol of the minimum"""
    candidate_costs = costs[candidates]
    cheapest = candidate_costs.min()
    return int(candidates[np.flatnonzero(candidate_costs <= cheapest + cost_tol)[0]])


def _select_response(values: np.ndarray, costs: np.ndarray, tol: float, cost_tol: float) -> Tuple[int, int]:
    """(index of the cost-minimal best response, size of the payoff tie set)"""
    best = float(values.max())
    ties = np.flatnonzero(values >= _attacker_threshold(best, tol))
    return _pick_cheapest(ties, costs, cost_tol), len(ties)


def _select_defense(attacker_values: np.ndarray, costs: np.ndarray, tol: float,
                    cost_tol: float) -> Tuple[int, int]:
    """(index of the cost-minimal defense holding the attacker lowest, size of the tie set)"""
    best = float(attacker_values.min())
    ties = np.flatnonzero(attacker_values <= _defender_threshold(best, tol))
    return _pick_cheapest(ties, costs, cost_tol), len(ties)


def best_response_set(d: Action, actions_a: Sequence[Action], table: LossTable,
                      tol: float = 1e-8) -> Tuple[float, List[Action]]:
    """Maximum attacker payoff against d and every action reaching it within tol"""
    if not actions_a:
        raise ValidationError("attacker action set is empty")
    values = np.array([payoff_attacker(a, d, table) for a in actions_a])
    best = float(values.max())
    threshold = _attacker_threshold(best, tol)
    return best, [a for a, value in zip(actions_a, values) if value >= threshold]


def min_cost_response(responses: Sequence[Action], gamma_a: Sequence[float],
                      cost_tol: float = 1e-12) -> Action:
    """Cheapest response; equal costs go to the lexicographically smallest levels"""
    if not responses:
        raise ValidationError("no responses to choose from")
    gamma_a = np.asarray(gamma_a, dtype=float)
    costs = np.array([float(gamma_a @ r.levels) for r in responses])
    cheapest = costs.min()
    candidates = [r for r, c in zip(responses, costs) if c <= cheapest + cost_tol]
    return min(candidates, key=lambda r: tuple(r.levels))


# Backward induction

def _responses_to_defenses(tensor: np.ndarray, defense_levels: np.ndarray, L_a: int,
                           attack_steps: np.ndarray, attack_costs: np.ndarray,
                           tol: float, cost_tol: float) -> List[Tuple[float, int, int]]:
    """(attacker payoff, chosen attack index, tie count) for each defense in the chunk"""
    grid = np.arange(L_a + 1) / L_a
    index = tuple(attack_steps.T)
    out = []
    for d_levels in defense_levels:
        values = _contract(tensor, [grid * (1.0 - d_k) for d_k in d_levels])[index]
        chosen, ties = _select_response(values, attack_costs, tol, cost_tol)
        out.append((float(values[chosen]), chosen, ties))
    return out


def _chunks(count: int, parts: int) -> List[slice]:
    size = max(1, -(-count // max(1, parts)))
    return [slice(start, min(start + size, count)) for start in range(0, count, size)]


def _uses_flagged_losses(a: Action, d: Action, table: LossTable) -> bool:
    return any(pattern_prob(a, d, SparsityPattern.from_index(m, table.n)) > 0.0
               for m in table.flagged_patterns())


def solve_cbbi(config: GameConfig, table: LossTable, jobs: int = 1) -> CbseResult:
    """Cost-based backward induction.

    For every feasible defense the attacker plays its cheapest best response;
    the defender then takes the defense minimizing that attacker payoff, again
    cheapest first and lexicographic on remaining ties.
    """
    _check_dims(config.n, table)
    actions_a = enumerate_actions(config.n, config.L_a, config.gamma_a, config.action_cap)
    actions_d = enumerate_actions(config.n, config.L_d, config.gamma_d, config.action_cap)
    attack_steps = np.array([a.steps for a in actions_a], dtype=int).reshape(len(actions_a), config.n)
    attack_costs = np.array([a.cost for a in actions_a])
    defense_levels = np.array([d.levels for d in actions_d])
    tensor = _loss_tensor(table)

    logger.debug(f"CBBI over {len(actions_a)} attacks x {len(actions_d)} defenses")
    workers = cpu_count() if jobs < 0 else max(1, jobs)
    chunks = _chunks(len(actions_d), workers)
    if len(chunks) == 1:
        parts = [_responses_to_defenses(tensor, defense_levels, config.L_a, attack_steps, attack_costs,
                                        config.payoff_tie_tol, config.cost_tie_tol)]
    else:
        parts = Parallel(n_jobs=workers)(
            delayed(_responses_to_defenses)(tensor, defense_levels[chunk], config.L_a, attack_steps,
                                            attack_costs, config.payoff_tie_tol, config.cost_tie_tol)
            for chunk in chunks
        )
    responses = [item for part in parts for item in part]

    values = np.array([value for value, _, _ in responses])
    d_index, defender_ties = _select_defense(values, np.array([d.cost for d in actions_d]),
                                             config.payoff_tie_tol, config.cost_tie_tol)

    payoff, a_index, attacker_ties = responses[d_index]
    a_star, d_star = actions_a[a_index], actions_d[d_index]
    result = CbseResult(
        a_star=a_star,
        d_star=d_star,
        attacker_payoff=payoff,
        defender_payoff=-payoff,
        attacker_cost=a_star.cost,
        defender_cost=d_star.cost,
        num_attacker_ties=attacker_ties,
        num_defender_ties=defender_ties,
        used_nonconverged_losses=_uses_flagged_losses(a_star, d_star, table),
    )
    if result.used_nonconverged_losses:
        logger.warning("CBSE puts probability on loss-table entries whose synthesis did not converge")
    logger.info(f"CBSE found: a*={a_star} d*={d_star} attacker payoff {payoff:.6g}")
    return result


def brute_force_se(config: GameConfig, table: LossTable) -> Tuple[float, List[Tuple[Action, Action]]]:
    """Every Stackelberg equilibrium pair, without cost-based selection.

    Works from the fully materialized payoff matrix, independently of the
    contraction used by solve_cbbi.
    """
    _check_dims(config.n, table)
    actions_a = enumerate_actions(config.n, config.L_a, config.gamma_a, config.action_cap)
    actions_d = enumerate_actions(config.n, config.L_d, config.gamma_d, config.action_cap)
    pairs = len(actions_a) * len(actions_d)
    if pairs > config.pair_cap:
        raise CapExceeded(f"{pairs} strategy pairs exceed the pair cap {config.pair_cap}")

    U = payoff_matrix(actions_a, actions_d, table)
    best_responses = U.max(axis=0)
    se_payoff = float(best_responses.min())
    tol = config.payoff_tie_tol
    se_defenses = np.flatnonzero(best_responses <= _defender_threshold(se_payoff, tol))

    se_pairs = []
    for j in se_defenses:
        threshold = _attacker_threshold(float(best_responses[j]), tol)
        se_pairs.extend((actions_a[i], actions_d[j]) for i in np.flatnonzero(U[:, j] >= threshold))
    return se_payoff, se_pairs


def individual_optimization(config: GameConfig, table: LossTable,
                            cbse: Optional[CbseResult] = None, jobs: int = 1) -> IoResult:
    """Each player optimizes against an opponent who does not react.

    The attacker assumes no defense; the defender protects against that same
    attack profile. Both break ties by cost and then lexicographically.
    """
    _check_dims(config.n, table)
    cbse = cbse or solve_cbbi(config, table, jobs)
    actions_a = enumerate_actions(config.n, config.L_a, config.gamma_a, config.action_cap)
    actions_d = enumerate_actions(config.n, config.L_d, config.gamma_d, config.action_cap)
    attack_steps = np.array([a.steps for a in actions_a], dtype=int).reshape(len(actions_a), config.n)
    attack_costs = np.array([a.cost for a in actions_a])
    defense_steps = np.array([d.steps for d in actions_d], dtype=int).reshape(len(actions_d), config.n)

    no_defense = Action((0,) * config.n, config.L_d, 0.0)
    values_a = attacker_payoff_grid(no_defense, config.L_a, table)[tuple(attack_steps.T)]
    a_index, _ = _select_response(values_a, attack_costs, config.payoff_tie_tol, config.cost_tie_tol)
    a_io = actions_a[a_index]

    values_d = -defender_payoff_grid(a_io, config.L_d, table)[tuple(defense_steps.T)]
    d_index, _ = _select_defense(values_d, np.array([d.cost for d in actions_d]),
                                 config.payoff_tie_tol, config.cost_tie_tol)
    d_io = actions_d[d_index]

    # an attacker who does observe d_io
    (observed_payoff, _, _), = _responses_to_defenses(
        _loss_tensor(table), np.array([d_io.levels]), config.L_a, attack_steps, attack_costs,
        config.payoff_tie_tol, config.cost_tie_tol)
    result = IoResult(
        a_io=a_io,
        d_io=d_io,
        realized_payoff=payoff_attacker(a_io, d_io, table),
        defender_payoff_vs_best_response=-observed_payoff,
        attacker_payoff_vs_cbse_defense=payoff_attacker(a_io, cbse.d_star, table),
        cbse=cbse,
    )
    logger.info(f"IO baseline: a_io={a_io} d_io={d_io} realized payoff {result.realized_payoff:.6g}")
    return result


# Studies

def _sweep_row(result: CbseResult, J_opt: float) -> Dict:
    return {
        "attacker_payoff": result.attacker_payoff,
        "fractional_payoff_pct": result.fractional_payoff(J_opt),
        "defender_fractional_payoff_pct": fraction_percent(result.defender_payoff, J_opt),
        "a_star": " ".join(str(s) for s in result.a_star.steps),
        "d_star": " ".join(str(s) for s in result.d_star.steps),
        "attacker_cost": result.attacker_cost,
        "defender_cost": result.defender_cost,
        "num_attacker_ties": result.num_attacker_ties,
        "num_defender_ties": result.num_defender_ties,
        "used_nonconverged_losses": result.used_nonconverged_losses,
    }


def cost_sweep(table: LossTable, base_config: GameConfig, ga_grid: Sequence[float],
               gd_grid: Sequence[float], jobs: int = 1) -> Iterator[Dict]:
    """CBSE over a grid of uniform per-node costs, one row per (gamma_a, gamma_d).

    Rows are yielded as they complete; a failing point yields a row carrying
    the error instead of aborting the sweep.
    """
    for gamma_a, gamma_d in itertools.product(ga_grid, gd_grid):
        row = {"gamma_a": float(gamma_a), "gamma_d": float(gamma_d), "error": ""}
        try:
            config = base_config.with_costs(gamma_a, gamma_d)
            row.update(_sweep_row(solve_cbbi(config, table, jobs), table.J_opt))
        except CbseError as exc:
            logger.warning(f"Sweep point gamma_a={gamma_a} gamma_d={gamma_d} failed: {exc}")
            row["error"] = f"{type(exc).__name__}: {exc}"
        yield row


def level_sweep(table: LossTable, base_config: GameConfig, La_values: Sequence[int],
                Ld_values: Sequence[int], jobs: int = 1) -> Iterator[Dict]:
    """CBSE for every (L_a, L_d) combination at fixed costs"""
    for L_a, L_d in itertools.product(La_values, Ld_values):
        row = {"L_a": int(L_a), "L_d": int(L_d), "error": ""}
        try:
            config = base_config.with_levels(L_a, L_d)
            row.update(_sweep_row(solve_cbbi(config, table, jobs), table.J_opt))
        except CbseError as exc:
            logger.warning(f"Level point L_a={L_a} L_d={L_d} failed: {exc}")
            row["error"] = f"{type(exc).__name__}: {exc}"
        yield row
