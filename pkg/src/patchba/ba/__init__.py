"""Bundle adjustment: problem definition, LM solver, triangulation and baseline strategies."""

from .problem import BAProblem, PosePrior, residual, robust_loss, total_cost, observation_jacobians
from .solver import BAResult, LMOptions, solve
from .triangulation import triangulate, triangulate_many

__all__ = ["BAProblem", "PosePrior", "residual", "robust_loss", "total_cost", "observation_jacobians",
           "BAResult", "LMOptions", "solve", "triangulate", "triangulate_many"]
