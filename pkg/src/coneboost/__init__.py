"""Decision-focused gradient boosting over convex quadratic cone programs."""
from .boosting import BoostConfig, Ensemble, fit_dboost, fit_mse_boost
from .cones import ConeSpec, Free, NonNeg, Soc, Zero
from .qcp import QcpProblem, SolverSettings, solve, solve_batch
from .qcpdiff import backward, build_workspace
from .spo import DecisionContext, excess_cost, qspo_grad, qspo_loss
from .trees import fit_forest, fit_mse_tree, fit_spot_tree

__version__ = "0.1.0"

__all__ = [
    "BoostConfig", "ConeSpec", "DecisionContext", "Ensemble", "Free", "NonNeg", "QcpProblem", "Soc",
    "SolverSettings", "Zero", "backward", "build_workspace", "excess_cost", "fit_dboost", "fit_forest",
    "fit_mse_boost", "fit_mse_tree", "fit_spot_tree", "qspo_grad", "qspo_loss", "solve", "solve_batch",
]
