"""
Error hierarchy for the CBSE security-investment toolkit.
Every error carries the process exit code the CLI reports for it.
"""


class CbseError(Exception):
    """Base class for all toolkit errors"""
    exit_code = 1


# Numerics

class NumericalError(CbseError):
    exit_code = 3


class NotHurwitz(NumericalError):
    """A matrix that must be Hurwitz has an eigenvalue with real part >= threshold"""

    def __init__(self, abscissa: float, context: str = ""):
        self.abscissa = abscissa
        where = f" ({context})" if context else ""
        super().__init__(f"matrix not Hurwitz{where}: spectral abscissa {abscissa:.3e}")


class IllConditioned(NumericalError):
    """Lyapunov solve residual above tolerance"""


class NoStabilizingStart(NumericalError):
    """Initial feedback gain does not stabilize the closed loop"""


class LineSearchFailure(NumericalError):
    """No stabilizing step found above the minimum step size"""


# Input

class InputError(CbseError):
    exit_code = 2


class ValidationError(InputError):
    """A model or model set violates a named invariant"""

    def __init__(self, detail: str):
        self.detail = detail
        super().__init__(detail)


class ParseError(InputError):
    """A manifest or cache file is missing or cannot be parsed"""


class DimensionMismatch(InputError):
    """Array dimensions disagree"""


class PartitionTooSmall(InputError):
    """Node partition cannot hold the angle/frequency blocks of the consensus weight"""


class WeightSumMismatch(InputError):
    """Model occurrence probabilities do not sum to one"""


# Capacity

class CapExceeded(CbseError):
    """An enumeration would exceed its configured cap"""
    exit_code = 4


class GridCapExceeded(CapExceeded):
    """Feasible action set larger than the configured cap"""


# Cache

class HashMismatch(CbseError):
    """A cached loss table was computed for a different model"""
    exit_code = 5


# Robust games

class DegenerateDenominator(CbseError):
    """Per-model CBSE payoff is zero, so the relative mismatch is undefined"""
    exit_code = 6

    def __init__(self, model_index: int):
        self.model_index = model_index
        super().__init__(f"per-model CBSE payoff of model {model_index} is zero; mismatch undefined")
