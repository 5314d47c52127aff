"""
Configuration management for the CBSE security-investment toolkit
"""
import os
import logging
from typing import Optional

from dotenv import load_dotenv

from game import GameConfig
from lincontrol import SolverOptions

# Load environment variables
load_dotenv()


def _env_number(name: str, default: str, kind=float):
    raw = os.getenv(name, default)
    try:
        return kind(raw)
    except ValueError:
        raise ValueError(f"{name} must be a {kind.__name__}, got {raw!r}")


class Config:
    """Configuration settings for the toolkit, read from the environment"""

    def __init__(self, cache_dir: Optional[str] = None, jobs: Optional[int] = None,
                 enable_run_history: Optional[bool] = None):
        self.cache_dir = cache_dir or os.getenv('CBSE_CACHE_DIR', '.cbse_cache')
        self.jobs = jobs if jobs is not None else _env_number('CBSE_JOBS', str(os.cpu_count() or 1), int)
        if self.jobs == 0:
            raise ValueError("CBSE_JOBS must be non-zero")

        # Enumeration caps
        self.pattern_cap = _env_number('CBSE_PATTERN_CAP', '16', int)
        self.action_cap = _env_number('CBSE_ACTION_CAP', str(2 ** 24), int)
        self.pair_cap = _env_number('CBSE_PAIR_CAP', str(10 ** 7), int)

        # Solver and tie tolerances
        self.grad_tol = _env_number('CBSE_GRAD_TOL', '1e-7')
        self.max_iter = _env_number('CBSE_MAX_ITER', '5000', int)
        self.payoff_tie_tol = _env_number('CBSE_PAYOFF_TIE_TOL', '1e-8')
        self.cost_tie_tol = _env_number('CBSE_COST_TIE_TOL', '1e-12')

        if enable_run_history is None:
            enable_run_history = os.getenv('CBSE_RUN_HISTORY', '0') == '1'
        self.enable_run_history = enable_run_history
        self.log_level = os.getenv('CBSE_LOG_LEVEL', 'INFO').upper()

    def solver_options(self, allow_marginal: bool = False) -> SolverOptions:
        """Structured-synthesis options; marginal models accept any strictly stable closed loop"""
        options = SolverOptions(grad_tol=self.grad_tol, max_iter=self.max_iter)
        if allow_marginal:
            options.hurwitz_tol = 0.0
        return options

    def game_config(self, n: int, L_a: int, L_d: int, gamma_a, gamma_d) -> GameConfig:
        """Game with this configuration's tie tolerances and caps; scalar costs apply to every node"""
        return GameConfig(
            n=n,
            L_a=L_a,
            L_d=L_d,
            gamma_a=_per_node(gamma_a, n),
            gamma_d=_per_node(gamma_d, n),
            payoff_tie_tol=self.payoff_tie_tol,
            cost_tie_tol=self.cost_tie_tol,
            action_cap=self.action_cap,
            pair_cap=self.pair_cap,
        )

    def get_loss_cache(self):
        from loss_cache import get_loss_cache
        return get_loss_cache(self.cache_dir)

    def get_run_tracker(self, command: str):
        from run_tracker import initialize_run_tracking
        db_path = os.path.join(self.cache_dir, 'run_history.db') if self.enable_run_history else None
        return initialize_run_tracking(command, self.to_dict(), db_path=db_path)

    def to_dict(self) -> dict:
        return {
            'cache_dir': str(self.cache_dir),
            'jobs': self.jobs,
            'pattern_cap': self.pattern_cap,
            'action_cap': self.action_cap,
            'pair_cap': self.pair_cap,
            'grad_tol': self.grad_tol,
            'max_iter': self.max_iter,
            'payoff_tie_tol': self.payoff_tie_tol,
            'cost_tie_tol': self.cost_tie_tol,
        }


def _per_node(gamma, n: int):
    if isinstance(gamma, (int, float)):
        return [float(gamma)] * n
    return [float(g) for g in gamma]


def setup_logging(level: Optional[str] = None):
    """Configure basic logging"""
    level = (level or os.getenv('CBSE_LOG_LEVEL', 'INFO')).upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.StreamHandler()
        ]
    )
    return logging.getLogger(__name__)
