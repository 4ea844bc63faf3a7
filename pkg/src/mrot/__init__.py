"""Mini-batch regularized optimal transport for regression domain adaptation."""

from mrot.ground_cost import CostMatrix, JsCostParams, euclidean_cost, js_cost, normalize_distances
from mrot.transport import Coupling, OtParams, exact_ot_oracle, ot_loss, sinkhorn, solve_mrot_plan

__all__ = [
    "CostMatrix",
    "Coupling",
    "JsCostParams",
    "OtParams",
    "euclidean_cost",
    "exact_ot_oracle",
    "js_cost",
    "normalize_distances",
    "ot_loss",
    "sinkhorn",
    "solve_mrot_plan",
]

__version__ = "0.1.0"
