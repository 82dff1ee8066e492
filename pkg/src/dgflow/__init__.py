"""dgflow: a 2D discontinuous-Galerkin laboratory for incompressible Stokes and
steady Navier-Stokes flow with mass-flux and broken grad-div penalization."""

from .analysis import (
    ErrorReport,
    ManufacturedCase,
    builtin_case,
    compare_discrete,
    compute_errors,
    make_polynomial_case,
    zero_case,
)
from .forms import AssembledSystem, StabilizationParams
from .mesh import (
    Facet,
    FacetTopology,
    Mesh,
    MeshLoadError,
    TopologyError,
    build_facet_topology,
    build_structured_quad_mesh,
    build_structured_triangle_mesh,
    load_mesh,
)
from .quadrature import QuadratureRule, interval_rule, quad_rule, reference_rule, triangle_rule
from .solver import (
    ProblemSetup,
    SolveResult,
    SolverError,
    default_sigma,
    solve_linear_saddle,
    solve_nse_picard,
    solve_stokes_cr,
    solve_stokes_dg,
    solve_stokes_hdiv,
)
from .spaces import (
    FeSpace,
    NormalContinuityConstraints,
    SpaceConfig,
    build_normal_constraints,
    build_space,
    eval_basis,
    interpolate_bdm,
    l2_project_pressure,
)

__version__ = "0.1.0"
