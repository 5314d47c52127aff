"""
Dense linear-control numerics for the security-investment game.
Lyapunov solves, H2 cost and gradient, and feedback-gain synthesis under a
structural sparsity mask.
"""
import logging
from dataclasses import dataclass, asdict
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg

from errors import (
    DimensionMismatch,
    IllConditioned,
    LineSearchFailure,
    NoStabilizingStart,
    NotHurwitz,
    NumericalError,
)

logger = logging.getLogger(__name__)

Partition = Tuple[Tuple[int, int], ...]


class LinkMode(str, Enum):
    """Which feedback links a successful attack on a node removes"""
    FULL_NODE = "full_node"
    INTER_NODE_ONLY = "inter_node_only"


@dataclass(eq=False)
class StateSpaceModel:
    """Linear network control system dx/dt = Ax + Bu + Dw with H2 weights Q, R.

    `partition` lists (m_i, r_i) per node: node i owns m_i consecutive states
    and r_i consecutive inputs.
    """
    A: np.ndarray
    B: np.ndarray
    D: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    partition: Partition
    name: str = "model"

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        self.D = np.atleast_2d(np.asarray(self.D, dtype=float))
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        self.partition = tuple((int(m_i), int(r_i)) for m_i, r_i in self.partition)

        m = self.A.shape[0]
        if self.A.shape != (m, m):
            raise DimensionMismatch(f"A must be square, got {self.A.shape}")
        if self.B.shape[0] != m:
            raise DimensionMismatch(f"B has {self.B.shape[0]} rows, expected {m}")
        if self.D.shape[0] != m:
            raise DimensionMismatch(f"D has {self.D.shape[0]} rows, expected {m}")
        if self.Q.shape != (m, m):
            raise DimensionMismatch(f"Q is {self.Q.shape}, expected {(m, m)}")
        r = self.B.shape[1]
        if self.R.shape != (r, r):
            raise DimensionMismatch(f"R is {self.R.shape}, expected {(r, r)}")
        if not self.partition:
            raise DimensionMismatch("node partition is empty")
        if sum(m_i for m_i, _ in self.partition) != m:
            raise DimensionMismatch(f"partition states sum to {sum(p[0] for p in self.partition)}, expected {m}")
        if sum(r_i for _, r_i in self.partition) != r:
            raise DimensionMismatch(f"partition inputs sum to {sum(p[1] for p in self.partition)}, expected {r}")
        if any(m_i < 0 or r_i < 0 for m_i, r_i in self.partition):
            raise DimensionMismatch("partition entries must be non-negative")

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def r(self) -> int:
        return self.B.shape[1]

    @property
    def q(self) -> int:
        return self.D.shape[1]

    @property
    def n(self) -> int:
        return len(self.partition)


@dataclass(eq=False)
class GainMatrix:
    """Feedback gain u = -Kx with its allowed support"""
    K: np.ndarray
    mask: np.ndarray
    stabilizing: bool = True

    def is_feasible(self) -> bool:
        return bool(np.all(self.K[self.mask == 0] == 0.0))


@dataclass
class SolverOptions:
    """Tuning of the structured synthesis and the Lyapunov solver"""
    grad_tol: float = 1e-7
    max_iter: int = 5000
    armijo: float = 1e-4
    shrink: float = 0.5
    initial_step: float = 1.0
    min_step: float = 1e-14
    max_step: float = 1e6
    hurwitz_tol: float = 1e-9
    lyap_residual_tol: float = 1e-8

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass(eq=False)
class SynthesisReport:
    K: GainMatrix
    J: float
    iterations: int
    final_gradient_norm: float
    converged: bool

    def to_dict(self) -> Dict:
        return {
            "J": self.J,
            "iterations": self.iterations,
            "final_gradient_norm": self.final_gradient_norm,
            "converged": self.converged,
        }


GainLike = Union[GainMatrix, np.ndarray, Sequence[Sequence[float]]]


def _gain_array(K: GainLike) -> np.ndarray:
    if isinstance(K, GainMatrix):
        return K.K
    return np.atleast_2d(np.asarray(K, dtype=float))


def spectral_abscissa(A: np.ndarray) -> float:
    """Largest real part over the eigenvalues of A"""
    return float(np.max(linalg.eigvals(A).real))


def is_hurwitz(A: np.ndarray, threshold: float = 1e-9) -> bool:
    return spectral_abscissa(A) < -threshold


def solve_lyapunov(Acl: np.ndarray, Rhs: np.ndarray,
                   residual_tol: float = 1e-8,
                   hurwitz_tol: float = 1e-9) -> np.ndarray:
    """Solve Acl^T P + P Acl + Rhs = 0 by the Bartels-Stewart (Schur) method.

    Raises NotHurwitz when Acl is not stable and IllConditioned when the
    Frobenius residual exceeds residual_tol * max(1, ||Rhs||_F).
    """
    Acl = np.atleast_2d(np.asarray(Acl, dtype=float))
    Rhs = np.atleast_2d(np.asarray(Rhs, dtype=float))
    if Acl.shape[0] != Acl.shape[1] or Rhs.shape != Acl.shape:
        raise DimensionMismatch(f"Lyapunov operands {Acl.shape} and {Rhs.shape} disagree")

    abscissa = spectral_abscissa(Acl)
    if abscissa >= -hurwitz_tol:
        raise NotHurwitz(abscissa, "closed loop")

    # scipy solves a X + X a^H = q
    P = linalg.solve_continuous_lyapunov(Acl.T, -Rhs)
    P = 0.5 * (P + P.T)

    residual = np.linalg.norm(Acl.T @ P + P @ Acl + Rhs, "fro")
    bound = residual_tol * max(1.0, float(np.linalg.norm(Rhs, "fro")))
    if not np.isfinite(residual) or residual > bound:
        raise IllConditioned(f"Lyapunov residual {residual:.3e} exceeds {bound:.3e}")
    return P


def _closed_loop(model: StateSpaceModel, K: np.ndarray) -> np.ndarray:
    if K.shape != (model.r, model.m):
        raise DimensionMismatch(f"gain is {K.shape}, expected {(model.r, model.m)}")
    return model.A - model.B @ K


def _observability_gramian(model: StateSpaceModel, K: np.ndarray,
                           options: SolverOptions) -> Tuple[np.ndarray, np.ndarray]:
    Acl = _closed_loop(model, K)
    P = solve_lyapunov(Acl, model.Q + K.T @ model.R @ K,
                       options.lyap_residual_tol, options.hurwitz_tol)
    return Acl, P


def h2_cost(model: StateSpaceModel, K: GainLike,
            options: Optional[SolverOptions] = None) -> float:
    """J(K) = trace(D^T P D) with P the closed-loop observability Gramian"""
    options = options or SolverOptions()
    K = _gain_array(K)
    _, P = _observability_gramian(model, K, options)
    return float(np.trace(model.D.T @ P @ model.D))


def h2_cost_and_gradient(model: StateSpaceModel, K: GainLike,
                         options: Optional[SolverOptions] = None) -> Tuple[float, np.ndarray]:
    """Cost and gradient 2(RK - B^T P)L, L the controllability Gramian of (A-BK, D)"""
    options = options or SolverOptions()
    K = _gain_array(K)
    Acl, P = _observability_gramian(model, K, options)
    L = solve_lyapunov(Acl.T, model.D @ model.D.T,
                       options.lyap_residual_tol, options.hurwitz_tol)
    J = float(np.trace(model.D.T @ P @ model.D))
    grad = 2.0 * (model.R @ K - model.B.T @ P) @ L
    return J, grad


def h2_gradient(model: StateSpaceModel, K: GainLike,
                options: Optional[SolverOptions] = None) -> np.ndarray:
    return h2_cost_and_gradient(model, K, options)[1]


def _check_mask(model: StateSpaceModel, mask) -> np.ndarray:
    mask = np.atleast_2d(np.asarray(mask, dtype=float))
    if mask.shape != (model.r, model.m):
        raise DimensionMismatch(f"mask is {mask.shape}, expected {(model.r, model.m)}")
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise DimensionMismatch("mask entries must be 0 or 1")
    return mask


def _armijo_step(model: StateSpaceModel, K: np.ndarray, J: float, G: np.ndarray,
                 step: float, options: SolverOptions) -> Optional[Tuple[np.ndarray, float]]:
    """Backtrack from `step` along -G.

    Returns the accepted (K, J), or None when stabilizing trials exist but none
    gives sufficient decrease (round-off stagnation).
    """
    g2 = float(np.vdot(G, G))
    t = step
    found_stabilizing = False
    while t >= options.min_step:
        trial = K - t * G
        try:
            J_trial = h2_cost(model, trial, options)
        except (NotHurwitz, IllConditioned):
            t *= options.shrink
            continue
        found_stabilizing = True
        if J_trial <= J - options.armijo * t * g2:
            return trial, J_trial
        t *= options.shrink
    if not found_stabilizing:
        raise LineSearchFailure(f"no stabilizing step above {options.min_step:.1e}")
    return None


def synth_structured(model: StateSpaceModel, mask,
                     options: Optional[SolverOptions] = None,
                     initial_gain: Optional[GainLike] = None) -> SynthesisReport:
    """Structured H2 synthesis by projected gradient descent.

    The gradient is projected onto the mask support, the step length comes
    from a Barzilai-Borwein guess refined by Armijo backtracking, and trial
    gains that destabilize the closed loop count as failed steps. Starts from
    K = 0 unless `initial_gain` is given (it is projected onto the mask).

    Every accepted step lowers J, so the returned gain is the best one found.
    `converged` is False when the loop stops early: on stagnation (no trial
    gives sufficient decrease, iterations < max_iter), on a numerical failure
    after at least one accepted step, or at max_iter. A numerical failure
    before any step is accepted propagates.
    """
    options = options or SolverOptions()
    mask = _check_mask(model, mask)
    if initial_gain is None:
        K = np.zeros((model.r, model.m))
    else:
        K = _gain_array(initial_gain) * mask

    try:
        J, grad = h2_cost_and_gradient(model, K, options)
    except (NotHurwitz, IllConditioned) as exc:
        raise NoStabilizingStart(f"initial gain does not stabilize {model.name}: {exc}") from exc

    G = grad * mask
    tol = options.grad_tol * (1.0 + abs(J))
    gnorm = float(np.max(np.abs(G))) if G.size else 0.0
    if not mask.any() or gnorm <= tol:
        return SynthesisReport(GainMatrix(K, mask), J, 0, gnorm, True)

    J_start = J
    K_prev: Optional[np.ndarray] = None
    G_prev: Optional[np.ndarray] = None
    iterations = 0
    converged = False
    while iterations < options.max_iter:
        step = options.initial_step
        if K_prev is not None:
            s = K - K_prev
            y = G - G_prev
            sy = float(np.vdot(s, y))
            if sy > 0.0:
                step = min(max(float(np.vdot(s, s)) / sy, options.min_step), options.max_step)

        try:
            accepted = _armijo_step(model, K, J, G, step, options)
        except NumericalError as exc:
            if iterations == 0:
                raise
            logger.warning(f"Synthesis on {model.name} stopped after {iterations} iterations: {exc}")
            break
        if accepted is None:
            logger.warning(f"Synthesis stagnated on {model.name} after {iterations} iterations "
                           f"(gradient {gnorm:.3e}, tolerance {tol:.3e})")
            break

        K_prev, G_prev = K, G
        K, J = accepted
        iterations += 1
        try:
            J, grad = h2_cost_and_gradient(model, K, options)
        except NumericalError as exc:
            logger.warning(f"Synthesis on {model.name} stopped after {iterations} iterations: {exc}")
            break
        G = grad * mask
        gnorm = float(np.max(np.abs(G)))
        if gnorm <= tol:
            converged = True
            break

    if not converged and iterations >= options.max_iter:
        logger.warning(f"Synthesis on {model.name} hit max_iter={options.max_iter} "
                       f"(gradient {gnorm:.3e}, tolerance {tol:.3e})")
    logger.debug(f"Synthesis {model.name}: J {J_start:.6g} -> {J:.6g} in {iterations} iterations")

    K = K * mask
    return SynthesisReport(GainMatrix(K, mask), J, iterations, gnorm, converged)


def synth_unstructured(model: StateSpaceModel,
                       options: Optional[SolverOptions] = None) -> SynthesisReport:
    """Unstructured H2 optimum: the all-ones mask"""
    return synth_structured(model, np.ones((model.r, model.m)), options)


def kleinman_gain(model: StateSpaceModel, tol: float = 1e-12, max_iter: int = 200,
                  options: Optional[SolverOptions] = None) -> SynthesisReport:
    """Newton-Kleinman iteration for the Riccati-optimal gain, started at K = 0"""
    options = options or SolverOptions()
    K = np.zeros((model.r, model.m))
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        _, P = _observability_gramian(model, K, options)
        K_next = linalg.solve(model.R, model.B.T @ P, assume_a="pos")
        change = float(np.linalg.norm(K_next - K, "fro"))
        K = K_next
        if change <= tol * (1.0 + float(np.linalg.norm(K, "fro"))):
            converged = True
            break

    J, grad = h2_cost_and_gradient(model, K, options)
    mask = np.ones_like(K)
    return SynthesisReport(GainMatrix(K, mask), J, iterations, float(np.max(np.abs(grad))), converged)


def block_slices(partition: Sequence[Tuple[int, int]]) -> Tuple[List[slice], List[slice]]:
    """Input (row) and state (column) slices of each node's block in K"""
    rows, cols = [], []
    r0 = c0 = 0
    for m_i, r_i in partition:
        rows.append(slice(r0, r0 + r_i))
        cols.append(slice(c0, c0 + m_i))
        r0 += r_i
        c0 += m_i
    return rows, cols


def build_mask(pattern, partition: Sequence[Tuple[int, int]],
               mode: Union[LinkMode, str] = LinkMode.FULL_NODE) -> np.ndarray:
    """Allowed support of K under a sparsity pattern (1 = node survives).

    full_node removes every block row and block column of an attacked node;
    inter_node_only keeps the attacked node's self block K_kk.
    """
    bits = tuple(int(b) for b in getattr(pattern, "bits", pattern))
    if len(bits) != len(partition):
        raise DimensionMismatch(f"pattern has {len(bits)} nodes, partition has {len(partition)}")
    if any(b not in (0, 1) for b in bits):
        raise DimensionMismatch(f"pattern entries must be 0 or 1, got {bits}")
    mode = LinkMode(mode)

    rows, cols = block_slices(partition)
    r = sum(r_i for _, r_i in partition)
    m = sum(m_i for m_i, _ in partition)
    mask = np.ones((r, m))
    for k, bit in enumerate(bits):
        if bit:
            continue
        if mode is LinkMode.FULL_NODE:
            mask[rows[k], :] = 0.0
            mask[:, cols[k]] = 0.0
        else:
            for p in range(len(bits)):
                if p != k:
                    mask[rows[k], cols[p]] = 0.0
                    mask[rows[p], cols[k]] = 0.0
    return mask
