"""Saddle-point solvers: stabilized DG Stokes, constrained H(div)-DG Stokes,
Crouzeix-Raviart Stokes, and Picard-iterated Navier-Stokes.

All linear systems are solved by a sparse LU factorization followed by a few
iterative-refinement passes with extended-precision residuals, which keeps
both the residual and the recovered pressure at rounding level even for very
large penalty parameters.  The pressure zero-mean condition enters as a
Lagrange multiplier row; normal-continuity constraints, when present, enter the
same way.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .forms import (
    AssembledSystem,
    StabilizationParams,
    assemble_bh,
    assemble_convection_inflow,
    assemble_convection_upwind,
    assemble_energy_matrix,
    assemble_gradgrad,
    assemble_graddiv,
    assemble_jh_flux,
    assemble_load,
    assemble_pressure_mean,
    assemble_sip,
    weak_dirichlet_parts,
)
from .mesh import TRIANGLE, FacetTopology, Mesh, build_facet_topology
from .spaces import (
    FeSpace,
    NormalContinuityConstraints,
    SpaceConfig,
    build_normal_constraints,
    build_space,
)

RESIDUAL_TOL = 1e-10


class SolverError(RuntimeError):
    """Singular factorization or residual above tolerance after refinement."""


@dataclass
class SolveResult:
    u_coeffs: np.ndarray
    p_coeffs: np.ndarray
    multipliers: np.ndarray  # mean-value multiplier first, then constraint multipliers
    linear_residual: float
    picard_iters: int = 0
    converged: bool = True


def default_sigma(k: int) -> float:
    return 4.0 * k * k


def solve_linear_saddle(
    system: AssembledSystem,
    constraints: Optional[NormalContinuityConstraints] = None,
    free_u: Optional[np.ndarray] = None,
) -> SolveResult:
    """Direct solve of the block system [A B^T (L^T); B 0; (L) 0] with the
    pressure mean-value row appended, plus one iterative-refinement pass.

    free_u optionally restricts the velocity block to a subset of dofs
    (used for strong boundary conditions of the Crouzeix-Raviart method);
    eliminated dofs keep the value already implied by the right-hand side 0.
    """
    A, B, m = system.A, system.B, system.m
    rhs_u, rhs_p = system.rhs_u, system.rhs_p
    nu_full = A.shape[0]
    if free_u is not None:
        A = A[free_u][:, free_u]
        B = B[:, free_u]
        rhs_u = rhs_u[free_u]
    ndu, ndp = A.shape[0], B.shape[0]
    # drop rounding-level entries of the mean vector: with an L2-orthonormal
    # basis only the constant mode per cell integrates to a nonzero value, and
    # a dense multiplier row would wreck the fill-reducing ordering
    msp = m.copy()
    msp[np.abs(msp) <= 1e-13 * np.abs(msp).max()] = 0.0
    mcol = sparse.csr_matrix(msp.reshape(-1, 1))
    blocks = [
        [A, B.T, None],
        [B, None, mcol],
        [None, mcol.T, None],
    ]
    rhs = [rhs_u, rhs_p, np.zeros(1)]
    if constraints is not None:
        if free_u is not None:
            raise ValueError("constraints and dof elimination cannot be combined")
        L = constraints.matrix
        blocks[0].append(L.T)
        blocks[1].append(None)
        blocks[2].append(None)
        blocks.append([L, None, None, None])
        rhs.append(np.zeros(L.shape[0]))
    K = sparse.bmat(blocks, format="csc")
    b = np.concatenate(rhs)

    try:
        lu = splu(K)
    except RuntimeError as exc:
        raise SolverError(f"singular factorization of the saddle-point system: {exc}") from exc
    x = lu.solve(b)
    # Iterative refinement keeps large-penalty systems accurate.  Residuals are
    # computed in extended precision where the platform provides it: with a
    # gamma/nu ratio of 1e6 and more, the condition number makes plain
    # double-precision refinement stall at a forward error that visibly
    # pollutes the recovered pressure.  The residual is normalized as a
    # backward error, |r| / (|K| |x| + |b|), since |r|/|b| alone is
    # unattainable when the penalty terms make |K| |x| >> |b|.
    extended = np.finfo(np.longdouble).eps < np.finfo(np.float64).eps
    K_hp = K.astype(np.longdouble) if extended else K
    b_hp = b.astype(K_hp.dtype)
    Knorm = float(np.abs(K).sum(axis=0).max())  # 1-norm
    bnorm = np.linalg.norm(b)

    def residual_of(xv):
        return np.asarray(b_hp - K_hp @ xv.astype(K_hp.dtype), dtype=np.float64)

    def backward_error(xv, rv):
        denom = Knorm * np.linalg.norm(xv) + bnorm
        return float(np.linalg.norm(rv) / denom) if denom > 0 else float(np.linalg.norm(rv))

    xnorm = np.linalg.norm(x)
    for _ in range(4):
        dx = lu.solve(residual_of(x))
        x = x + dx
        if np.linalg.norm(dx) <= 1e-15 * max(xnorm, np.linalg.norm(x)):
            break
        xnorm = np.linalg.norm(x)
    r = residual_of(x)
    residual = backward_error(x, r)
    if not np.isfinite(residual) or residual > RESIDUAL_TOL:
        raise SolverError(
            f"linear solve did not reach relative residual {RESIDUAL_TOL:g} "
            f"after refinement (got {residual:.3e})"
        )
    u = x[:ndu]
    if free_u is not None:
        full = np.zeros(nu_full)
        full[free_u] = u
        u = full
    return SolveResult(
        u_coeffs=u,
        p_coeffs=x[ndu : ndu + ndp],
        multipliers=x[ndu + ndp :],
        linear_residual=residual,
    )


# ---------------------------------------------------------------------------
# cached problem setup (operators independent of gamma / gamma_gd / nu)


@dataclass
class ProblemSetup:
    """Spaces and gamma-independent operators for one (mesh, k, case, sigma)."""

    mesh: Mesh
    k: int
    case: "object"  # ManufacturedCase-like: nu, f, g_D attributes
    sigma: float
    method: str = "dg"  # "dg" or "cr"
    facets: FacetTopology = field(init=False)
    V: FeSpace = field(init=False)
    Q: FeSpace = field(init=False)

    def __post_init__(self):
        mesh = self.mesh
        self.facets = build_facet_topology(mesh)
        if self.method == "cr":
            if mesh.cell_kind != TRIANGLE:
                raise ValueError("the Crouzeix-Raviart method requires triangles")
            vconf = SpaceConfig("CR_vector", 1)
            qconf = SpaceConfig("P0_scalar", 0)
        elif mesh.cell_kind == TRIANGLE:
            vconf = SpaceConfig("Pk_dc_vector", self.k)
            qconf = SpaceConfig("Pk_dc_scalar", self.k - 1)
        else:
            vconf = SpaceConfig("Qk_dc_vector", self.k)
            qconf = SpaceConfig("Qk_dc_scalar", self.k - 1)
        self.V = build_space(mesh, vconf, self.facets)
        self.Q = build_space(mesh, qconf, self.facets)
        if self.method == "cr":
            self.A_visc = assemble_gradgrad(self.V)
            self.B = assemble_bh(self.V, self.Q, self.facets, include_facets=False)
        else:
            self.A_visc = assemble_sip(self.V, self.facets, self.sigma)
            self.B = assemble_bh(self.V, self.Q, self.facets)
        self.Jflux = assemble_jh_flux(self.V, self.facets)
        self.GD = assemble_graddiv(self.V)
        self.m = assemble_pressure_mean(self.Q)
        self.f_load = assemble_load(self.V, self.case.f)
        if getattr(self.case, "g_D", None) is not None:
            self.wd_visc, self.wd_flux, self.wd_p = weak_dirichlet_parts(
                self.V, self.Q, self.facets, self.sigma, self.case.g_D
            )
        else:
            self.wd_visc = np.zeros(self.V.dim)
            self.wd_flux = np.zeros(self.V.dim)
            self.wd_p = np.zeros(self.Q.dim)
        self._energy = None

    @property
    def energy_matrix(self):
        if self._energy is None:
            self._energy = assemble_energy_matrix(self.V, self.facets, self.sigma)
        return self._energy

    def system(self, params: StabilizationParams, convection=None) -> AssembledSystem:
        A = params.nu * self.A_visc + params.gamma * self.Jflux + params.gamma_gd * self.GD
        symmetric = convection is None
        if convection is not None:
            A = A + convection
        rhs_u = self.f_load + params.nu * self.wd_visc + params.gamma * self.wd_flux
        return AssembledSystem(
            A=A.tocsr(), B=self.B, m=self.m,
            rhs_u=rhs_u, rhs_p=self.wd_p.copy(), symmetric=symmetric,
        )

    def cr_free_dofs(self) -> np.ndarray:
        """Interior-facet velocity dofs (strong homogeneous no-slip)."""
        nf = self.facets.num_facets
        interior = self.facets.interior_facets
        return np.concatenate([interior, nf + interior])


def _params(case, k, params: Optional[StabilizationParams]) -> StabilizationParams:
    if params is None:
        return StabilizationParams(nu=case.nu, sigma=default_sigma(k))
    return params


def solve_stokes_dg(
    mesh: Mesh,
    k: int,
    case,
    params: StabilizationParams,
    setup: Optional[ProblemSetup] = None,
) -> SolveResult:
    """Stabilized DG Stokes with mass-flux and broken grad-div penalties."""
    if setup is None:
        setup = ProblemSetup(mesh, k, case, params.sigma)
    return solve_linear_saddle(setup.system(params))


def solve_stokes_hdiv(
    mesh: Mesh,
    k: int,
    case,
    sigma: Optional[float] = None,
    setup: Optional[ProblemSetup] = None,
    constraints: Optional[NormalContinuityConstraints] = None,
) -> SolveResult:
    """Normal-continuous (H(div)-conforming) DG Stokes via explicit constraint rows.

    Only homogeneous Dirichlet cases: the constraints force zero normal flux on
    the boundary.
    """
    if getattr(case, "g_D", None) is not None:
        raise ValueError("the constrained H(div)-DG solver supports g_D = 0 only")
    sigma = sigma if sigma is not None else default_sigma(k)
    if setup is None:
        setup = ProblemSetup(mesh, k, case, sigma)
    if setup.mesh.cell_kind != TRIANGLE:
        raise ValueError("the constrained H(div)-DG solver requires triangles")
    if constraints is None:
        constraints = build_normal_constraints(setup.V, setup.facets)
    params = StabilizationParams(nu=case.nu, sigma=sigma)
    return solve_linear_saddle(setup.system(params), constraints=constraints)


def solve_stokes_cr(
    mesh: Mesh,
    case,
    params: StabilizationParams,
    setup: Optional[ProblemSetup] = None,
) -> SolveResult:
    """Crouzeix-Raviart Stokes with mass-flux penalty; strong no-slip via
    elimination of boundary-facet dofs (the case must have g_D = 0)."""
    if getattr(case, "g_D", None) is not None:
        raise ValueError("the CR solver supports homogeneous boundary data only")
    if setup is None:
        setup = ProblemSetup(mesh, 1, case, params.sigma, method="cr")
    sys = setup.system(
        StabilizationParams(nu=params.nu, sigma=params.sigma, gamma=params.gamma)
    )
    return solve_linear_saddle(sys, free_u=setup.cr_free_dofs())


def solve_nse_picard(
    mesh: Mesh,
    k: int,
    case,
    params: StabilizationParams,
    tol: float = 1e-8,
    max_iters: int = 25,
    setup: Optional[ProblemSetup] = None,
) -> SolveResult:
    """Steady Navier-Stokes by Picard iteration with upwind convection.

    The initial guess is the Stokes solution with the same penalties; the
    iteration stops when the relative increment in the discrete energy norm
    drops below tol.  Nonconvergence is flagged, not raised.

    For inhomogeneous Dirichlet data the interior upwind form is complemented
    by the consistent inflow boundary term (see assemble_convection_inflow).
    """
    if setup is None:
        setup = ProblemSetup(mesh, k, case, params.sigma)
    E = setup.energy_matrix
    g_D = getattr(case, "g_D", None)
    result = solve_linear_saddle(setup.system(params))
    u = result.u_coeffs
    converged = False
    iters = 0
    for iters in range(1, max_iters + 1):
        C = assemble_convection_upwind(setup.V, setup.facets, u)
        sys = setup.system(params, convection=C)
        if g_D is not None:
            Cb, rhs_b = assemble_convection_inflow(setup.V, setup.facets, u, g_D)
            sys.A = (sys.A + Cb).tocsr()
            sys.rhs_u = sys.rhs_u + rhs_b
        result = solve_linear_saddle(sys)
        unew = result.u_coeffs
        d = unew - u
        denom = math.sqrt(max(unew @ (E @ unew), 0.0))
        incr = math.sqrt(max(d @ (E @ d), 0.0))
        u = unew
        if denom == 0.0 or incr <= tol * denom:
            converged = True
            break
    result.picard_iters = iters
    result.converged = converged
    return result
