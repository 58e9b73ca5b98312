"""enar: masked autoregressive generation of continuous tokens via energy-score
maximization, plus the scoring-rule machinery to test it against known truths."""

__version__ = "0.1.0"

from . import diffcore
from .errors import (
    ConfigError,
    InputError,
    NumericalAbort,
    ShapeError,
    UnsupportedOracleError,
)

__all__ = [
    "diffcore",
    "ConfigError",
    "InputError",
    "NumericalAbort",
    "ShapeError",
    "UnsupportedOracleError",
    "__version__",
]
