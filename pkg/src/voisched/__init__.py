"""Value-of-information transmission scheduling for LQG networked control."""

from .model import (SystemModel, SteadyState, paper_system, solve_steady_state,
                    validate_model, diagonalize)
from .mdp import Grid, ValueFunction, build_kernel, solve_mdp, value_iterate
from .policy import Policy, PolicyKind, decide, voi_decision_map
from .sim import SimConfig, monte_carlo, simulate_episode

__version__ = "0.1.0"

__all__ = [
    "SystemModel", "SteadyState", "paper_system", "solve_steady_state", "validate_model",
    "diagonalize", "Grid", "ValueFunction", "build_kernel", "solve_mdp", "value_iterate",
    "Policy", "PolicyKind", "decide", "voi_decision_map", "SimConfig", "monte_carlo",
    "simulate_episode",
]
