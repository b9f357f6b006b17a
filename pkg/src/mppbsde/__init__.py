"""BSDEs driven by marked point processes: truncation, history-tree ODE solves, validation and control."""

__version__ = "0.1.0"

from .mpp import (History, HazardModel, MarkSpace, MarkovHazardModel, PoissonModel, SingleJumpModel, Trajectory,
                  build_model, simulate_history, simulate_trajectory)
from .problem import (BsdeProblem, Contraction, Generator, Terminal, beta_threshold, equivalent_norm,
                      lemma_threshold, lipschitz_audit, lp_beta_norm)
from .tree import HistoryTree, SolutionField, build_tree, snap_history
from .solver import apriori_check, ito_residual, picard_iterate, picard_map, solve_truncated
from .truncation import nonuniqueness_demo, truncation_bound, truncation_sweep
from .control import ControlProblem, cost, girsanov_weight, solve_control, verify_optimality

__all__ = [
    "History", "HazardModel", "MarkSpace", "MarkovHazardModel", "PoissonModel", "SingleJumpModel", "Trajectory",
    "build_model", "simulate_history", "simulate_trajectory",
    "BsdeProblem", "Contraction", "Generator", "Terminal", "beta_threshold", "equivalent_norm", "lemma_threshold",
    "lipschitz_audit", "lp_beta_norm",
    "HistoryTree", "SolutionField", "build_tree", "snap_history",
    "apriori_check", "ito_residual", "picard_iterate", "picard_map", "solve_truncated",
    "nonuniqueness_demo", "truncation_bound", "truncation_sweep",
    "ControlProblem", "cost", "girsanov_weight", "solve_control", "verify_optimality",
]
