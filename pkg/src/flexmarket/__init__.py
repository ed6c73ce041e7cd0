"""Game-theoretic real-time flexibility market simulator for distribution networks."""

from .game import ConsumerProfile, GameConstants
from .gne import SolveReport, run
from .grid import Bus, DistributionNetwork, Line
from .qpsolve import solve_shadow, solve_welfare

__version__ = "0.1.0"

__all__ = [
    "Bus",
    "ConsumerProfile",
    "DistributionNetwork",
    "GameConstants",
    "Line",
    "SolveReport",
    "run",
    "solve_shadow",
    "solve_welfare",
    "__version__",
]
