"""Discrete inverse divergence on perforated grids."""

from .grid import (
    EXTERIOR,
    FLUID,
    HOLE,
    ClearanceViolation,
    MaskedGrid,
    UnresolvableHoles,
    UnresolvableLayer,
    divergence,
    grad_norm,
    rasterize,
    read_grid_fields,
    write_grid_fields,
)
from .restriction import (
    CutoffPair,
    MeanDriftError,
    Scene,
    bogovskii_eps,
    build_cutoffs,
    build_scene,
    layer_mean,
    naive_projection,
    restriction_adjoint,
    restriction_apply,
)
from .solver import DivSolver, NonConvergence, NonZeroMean, solve_div_minimal
from .sweep import (
    GridBudgetExceeded,
    SurrogateFamily,
    check_literal_budget,
    operator_norm_sweep,
    surrogate_scene,
    write_sweep_csv,
)
