"""Design-based generalized synthetic control: weights, estimates, variances and exact randomization checks."""

from .panel import Assignment, AssignmentDesign, DesignKind, Panel, PanelError, PotentialPanel, load_panel
from .weights import Family, SolverError, WeightError, WeightSetSpec, WeightTensor, solve_weights

__all__ = [
    "Assignment", "AssignmentDesign", "DesignKind", "Family", "Panel", "PanelError",
    "PotentialPanel", "SolverError", "WeightError", "WeightSetSpec", "WeightTensor",
    "load_panel", "solve_weights",
]
