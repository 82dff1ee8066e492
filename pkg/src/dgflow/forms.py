"""Assembly of the discrete bilinear/linear forms into sparse operators.

Conventions: velocity dofs are blocked per cell as [component 0, component 1];
facet integrals use the facet parametrization a->b of the plus cell, with
ds = h_F dt.  On boundary facets jump and average both reduce to the trace.
All facet sums in the viscous, coupling and mass-flux forms include boundary
facets; the upwind convection facet terms are interior-only.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import sparse

from .mesh import FacetTopology
from .quadrature import interval_rule, reference_rule
from .spaces import FeSpace, cell_jacobians, map_to_physical, ref_edge_points


@dataclass(frozen=True)
class StabilizationParams:
    nu: float
    sigma: float
    gamma: float = 0.0
    gamma_gd: float = 0.0

    def __post_init__(self):
        if self.nu <= 0:
            raise ValueError("viscosity nu must be positive")
        if self.sigma < 1:
            raise ValueError("SIP penalty sigma must be >= 1")
        if self.gamma < 0 or self.gamma_gd < 0:
            raise ValueError("penalty parameters must be nonnegative")


@dataclass
class AssembledSystem:
    A: sparse.spmatrix  # velocity-velocity
    B: sparse.spmatrix  # pressure rows x velocity cols: b_h(u, q)
    m: np.ndarray  # pressure mean-value vector
    rhs_u: np.ndarray
    rhs_p: np.ndarray
    symmetric: bool = True


class _Coo:
    def __init__(self):
        self.rows, self.cols, self.vals = [], [], []

    def add(self, rdofs, cdofs, block):
        self.rows.append(np.repeat(rdofs, len(cdofs)))
        self.cols.append(np.tile(cdofs, len(rdofs)))
        self.vals.append(np.asarray(block, dtype=float).ravel())

    def build(self, shape) -> sparse.csr_matrix:
        if not self.rows:
            return sparse.csr_matrix(shape)
        return sparse.coo_matrix(
            (np.concatenate(self.vals), (np.concatenate(self.rows), np.concatenate(self.cols))),
            shape=shape,
        ).tocsr()


def _vol_degree(space: FeSpace, deg: Optional[int]) -> int:
    return deg if deg is not None else 2 * space.degree + 2


def _facet_degree(space: FeSpace, deg: Optional[int]) -> int:
    return deg if deg is not None else 2 * space.degree + 1


class _FacetTraces:
    """Cached reference values/gradients of the scalar basis along cell edges."""

    def __init__(self, space: FeSpace, t: np.ndarray):
        self.space = space
        self.t = t
        self._cache = {}

    def __call__(self, local_edge: int, starts_at_a: bool):
        key = (local_edge, starts_at_a)
        if key not in self._cache:
            ref = ref_edge_points(self.space.mesh.cell_kind, local_edge, self.t, starts_at_a)
            self._cache[key] = (ref,) + self.space.basis.eval(ref)
        return self._cache[key]


def _facet_sides(f):
    """(cell, local_edge, starts_at_a, jump_sign) for each side of a facet."""
    sides = [(f.plus_cell, f.plus_local, True, 1.0)]
    if f.minus_cell is not None:
        sides.append((f.minus_cell, f.minus_local, f.minus_starts_at_a, -1.0))
    return sides


def _side_data(space, traces, f, need_grads=False):
    """Per side: (dofs, values (ns,nq), normal derivatives (ns,nq) or None)."""
    out = []
    for cell, le, sa, sign in _facet_sides(f):
        ref, vals, ref_grads = traces(le, sa)
        dn = None
        if need_grads:
            g = space.cell_gradients(cell, ref, ref_grads)
            dn = g[:, :, 0] * f.normal[0] + g[:, :, 1] * f.normal[1]
        out.append((space.cell_dofs(cell), vals, dn, sign))
    return out


def assemble_gradgrad(space: FeSpace, deg: Optional[int] = None) -> sparse.csr_matrix:
    """Broken gradient product over cells (both vector components)."""
    rule = reference_rule(space.mesh.cell_kind, _vol_degree(space, deg))
    _, ref_grads = space.basis.eval(rule.points)
    acc = _Coo()
    ns = space.ns
    for c in range(space.mesh.num_cells):
        g = space.cell_gradients(c, rule.points, ref_grads)
        _, det, _ = cell_jacobians(space.mesh, c, rule.points)
        wdet = rule.weights * det
        block = np.einsum("inp,n,jnp->ij", g, wdet, g)
        dofs = space.cell_dofs(c)
        for comp in range(space.ncomp):
            d = dofs[comp * ns : (comp + 1) * ns]
            acc.add(d, d, block)
    return acc.build((space.dim, space.dim))


def assemble_mass(space: FeSpace, deg: Optional[int] = None) -> sparse.csr_matrix:
    rule = reference_rule(space.mesh.cell_kind, _vol_degree(space, deg))
    vals, _ = space.basis.eval(rule.points)
    acc = _Coo()
    ns = space.ns
    for c in range(space.mesh.num_cells):
        _, det, _ = cell_jacobians(space.mesh, c, rule.points)
        block = (vals * (rule.weights * det)) @ vals.T
        dofs = space.cell_dofs(c)
        for comp in range(space.ncomp):
            d = dofs[comp * ns : (comp + 1) * ns]
            acc.add(d, d, block)
    return acc.build((space.dim, space.dim))


def assemble_sip(
    space: FeSpace,
    facets: FacetTopology,
    sigma: float,
    deg_vol: Optional[int] = None,
    deg_facet: Optional[int] = None,
) -> sparse.csr_matrix:
    """Symmetric interior penalty form: broken gradients, sigma/h_F full-vector
    jump penalty, and both symmetric consistency terms; boundary facets use the
    trace convention."""
    A = assemble_gradgrad(space, deg_vol).tolil()
    rule = interval_rule(_facet_degree(space, deg_facet))
    t, w = rule.points, rule.weights
    traces = _FacetTraces(space, t)
    acc = _Coo()
    ns = space.ns
    for f in facets.facets:
        sides = _side_data(space, traces, f, need_grads=True)
        navg = 0.5 if f.minus_cell is not None else 1.0
        # stacked jump rows and average-normal-derivative rows over both sides
        J = np.concatenate([sign * vals for _, vals, _, sign in sides])  # (nsides*ns, nq)
        Dn = np.concatenate([navg * dn for _, _, dn, _ in sides])
        wq = w * f.length
        pen = (sigma / f.length) * (J * wq) @ J.T
        con = (Dn * wq) @ J.T
        block = pen - con - con.T
        for comp in range(space.ncomp):
            d = np.concatenate([dofs[comp * ns : (comp + 1) * ns] for dofs, _, _, _ in sides])
            acc.add(d, d, block)
    return (sparse.csr_matrix(A) + acc.build((space.dim, space.dim))).tocsr()


def assemble_jh_flux(
    space: FeSpace, facets: FacetTopology, deg_facet: Optional[int] = None
) -> sparse.csr_matrix:
    """Mass flux penalization: sum over all facets of (1/h_F) times the product
    of normal jumps."""
    rule = interval_rule(_facet_degree(space, deg_facet))
    t, w = rule.points, rule.weights
    traces = _FacetTraces(space, t)
    acc = _Coo()
    ns = space.ns
    for f in facets.facets:
        sides = _side_data(space, traces, f)
        # normal-jump rows for all dofs of all sides: sign * n_c * phi
        Jn = np.concatenate(
            [
                np.concatenate([sign * f.normal[c] * vals for c in range(2)])
                for _, vals, _, sign in sides
            ]
        )
        dall = np.concatenate([dofs for dofs, _, _, _ in sides])
        block = (1.0 / f.length) * (Jn * (w * f.length)) @ Jn.T
        acc.add(dall, dall, block)
    return acc.build((space.dim, space.dim))


def assemble_graddiv(space: FeSpace, deg: Optional[int] = None) -> sparse.csr_matrix:
    rule = reference_rule(space.mesh.cell_kind, _vol_degree(space, deg))
    _, ref_grads = space.basis.eval(rule.points)
    acc = _Coo()
    ns = space.ns
    for c in range(space.mesh.num_cells):
        g = space.cell_gradients(c, rule.points, ref_grads)
        _, det, _ = cell_jacobians(space.mesh, c, rule.points)
        wdet = rule.weights * det
        div = np.concatenate([g[:, :, 0], g[:, :, 1]])  # (nloc, nq)
        block = (div * wdet) @ div.T
        dofs = space.cell_dofs(c)
        acc.add(dofs, dofs, block)
    return acc.build((space.dim, space.dim))


def assemble_bh(
    V: FeSpace,
    Q: FeSpace,
    facets: FacetTopology,
    include_facets: bool = True,
    deg_vol: Optional[int] = None,
    deg_facet: Optional[int] = None,
) -> sparse.csr_matrix:
    """Pressure-velocity coupling b_h(w, q), rows = pressure dofs."""
    rule = reference_rule(V.mesh.cell_kind, _vol_degree(V, deg_vol))
    _, ref_grads = V.basis.eval(rule.points)
    qvals, _ = Q.basis.eval(rule.points)
    acc = _Coo()
    ns = V.ns
    for c in range(V.mesh.num_cells):
        g = V.cell_gradients(c, rule.points, ref_grads)
        _, det, _ = cell_jacobians(V.mesh, c, rule.points)
        wdet = rule.weights * det
        div = np.concatenate([g[:, :, 0], g[:, :, 1]])
        block = -(qvals * wdet) @ div.T
        acc.add(Q.cell_dofs(c), V.cell_dofs(c), block)
    if include_facets:
        frule = interval_rule(_facet_degree(V, deg_facet))
        t, w = frule.points, frule.weights
        vtraces = _FacetTraces(V, t)
        qtraces = _FacetTraces(Q, t)
        for f in facets.facets:
            vsides = _side_data(V, vtraces, f)
            qsides = _side_data(Q, qtraces, f)
            qavg = 0.5 if f.minus_cell is not None else 1.0
            Jn = np.concatenate(
                [
                    np.concatenate([sign * f.normal[c] * vals for c in range(2)])
                    for _, vals, _, sign in vsides
                ]
            )
            vd = np.concatenate([dofs for dofs, _, _, _ in vsides])
            Qavg = np.concatenate([qavg * vals for _, vals, _, _ in qsides])
            qd = np.concatenate([dofs for dofs, _, _, _ in qsides])
            block = (Qavg * (w * f.length)) @ Jn.T
            acc.add(qd, vd, block)
    return acc.build((Q.dim, V.dim))


def assemble_convection_upwind(
    V: FeSpace,
    facets: FacetTopology,
    w_coeffs: np.ndarray,
    deg_vol: Optional[int] = None,
    deg_facet: Optional[int] = None,
) -> sparse.csr_matrix:
    """Upwind convection c_h(w; u, v): volume transport plus interior-facet
    central and upwind jump terms.  Rows are test (v) dofs, columns trial (u)."""
    k = V.degree
    rule = reference_rule(V.mesh.cell_kind, deg_vol if deg_vol is not None else 3 * k + 1)
    vals, ref_grads = V.basis.eval(rule.points)
    acc = _Coo()
    ns = V.ns
    for c in range(V.mesh.num_cells):
        dofs = V.cell_dofs(c)
        g = V.cell_gradients(c, rule.points, ref_grads)
        _, det, _ = cell_jacobians(V.mesh, c, rule.points)
        wdet = rule.weights * det
        wx = w_coeffs[dofs[:ns]] @ vals
        wy = w_coeffs[dofs[ns:]] @ vals
        adv = wx * g[:, :, 0] + wy * g[:, :, 1]  # (w . grad) phi_i, (ns, nq)
        block = (vals * wdet) @ adv.T  # rows test j, cols trial i
        for comp in range(2):
            d = dofs[comp * ns : (comp + 1) * ns]
            acc.add(d, d, block)

    frule = interval_rule(deg_facet if deg_facet is not None else 3 * k + 1)
    t, w = frule.points, frule.weights
    traces = _FacetTraces(V, t)
    for fi in facets.interior_facets:
        f = facets.facets[fi]
        sides = _side_data(V, traces, f)
        # {{w_h}} . n_F at facet quadrature points
        wn = np.zeros(t.shape[0])
        for dofs, vals_s, _, _ in sides:
            wn += 0.5 * (
                (w_coeffs[dofs[:ns]] @ vals_s) * f.normal[0]
                + (w_coeffs[dofs[ns:]] @ vals_s) * f.normal[1]
            )
        J = np.concatenate([sign * vals_s for _, vals_s, _, sign in sides])
        Avg = np.concatenate([0.5 * vals_s for _, vals_s, _, _ in sides])
        wq = w * f.length
        central = -(Avg * (wq * wn)) @ J.T  # rows test, cols trial
        upwind = 0.5 * (J * (wq * np.abs(wn))) @ J.T
        block = central + upwind
        for comp in range(2):
            d = np.concatenate([dofs[comp * ns : (comp + 1) * ns] for dofs, _, _, _ in sides])
            acc.add(d, d, block)
    return acc.build((V.dim, V.dim))


def assemble_convection_inflow(
    V: FeSpace,
    facets: FacetTopology,
    w_coeffs: np.ndarray,
    g_D,
    deg_facet: Optional[int] = None,
):
    """Inflow upwind boundary term for weakly imposed Dirichlet data.

    The interior-only convection form leaves the inflow boundary value of the
    transported field uncontrolled when u = g_D is imposed weakly, which makes
    the Oseen operator unstable at convection-dominated parameters.  Treating
    the exterior trace as g_D in the standard upwind flux adds, on boundary
    facets, max(-w.n, 0) (u - g_D).v -- consistent (u = g_D there exactly) and
    positive semidefinite.  Returns (operator, rhs) with the g_D part moved to
    the right-hand side.
    """
    k = V.degree
    rule = interval_rule(deg_facet if deg_facet is not None else 3 * k + 3)
    t, w = rule.points, rule.weights
    traces = _FacetTraces(V, t)
    acc = _Coo()
    rhs = np.zeros(V.dim)
    ns = V.ns
    for fi in facets.boundary_facets:
        f = facets.facets[fi]
        (dofs, vals, _, _), = _side_data(V, traces, f)
        wn = (w_coeffs[dofs[:ns]] @ vals) * f.normal[0] + (
            w_coeffs[dofs[ns:]] @ vals
        ) * f.normal[1]
        coef = np.maximum(-wn, 0.0) * (w * f.length)
        if not np.any(coef):
            continue
        pa, pb = V.mesh.vertices[f.vertices[0]], V.mesh.vertices[f.vertices[1]]
        g = np.asarray(g_D(pa + np.outer(t, pb - pa)), dtype=float)
        block = (vals * coef) @ vals.T
        for c in range(2):
            d = dofs[c * ns : (c + 1) * ns]
            acc.add(d, d, block)
            rhs[d] += vals @ (coef * g[:, c])
    return acc.build((V.dim, V.dim)), rhs


def assemble_load(V: FeSpace, f_func, deg: Optional[int] = None) -> np.ndarray:
    """Load vector of a (possibly non-polynomial) vector field; elevated quadrature.

    The default degree is generous: the pressure-robustness checks need the
    quadrature error of trigonometric gradient loads far below the discretization
    error even on coarse meshes.
    """
    k = V.degree
    rule = reference_rule(V.mesh.cell_kind, deg if deg is not None else 2 * k + 12)
    vals, _ = V.basis.eval(rule.points)
    rhs = np.zeros(V.dim)
    ns = V.ns
    for c in range(V.mesh.num_cells):
        _, det, _ = cell_jacobians(V.mesh, c, rule.points)
        wdet = rule.weights * det
        x = map_to_physical(V.mesh, c, rule.points)
        fx = np.asarray(f_func(x), dtype=float)
        dofs = V.cell_dofs(c)
        rhs[dofs[:ns]] += vals @ (wdet * fx[:, 0])
        rhs[dofs[ns:]] += vals @ (wdet * fx[:, 1])
    return rhs


def weak_dirichlet_parts(
    V: FeSpace,
    Q: FeSpace,
    facets: FacetTopology,
    sigma: float,
    g_D,
    deg: Optional[int] = None,
):
    """Unscaled boundary-data functionals for weak imposition of u = g_D.

    Returns (r_visc, r_flux, rhs_p): the viscous part (sigma/h_F penalty plus
    gradient-flux consistency, to be scaled by nu), the normal-flux penalty
    part (scaled by gamma), and the boundary mass flux of g_D for the
    continuity rows.
    """
    k = V.degree
    rule = interval_rule(deg if deg is not None else 2 * k + 6)
    t, w = rule.points, rule.weights
    vtraces = _FacetTraces(V, t)
    qtraces = _FacetTraces(Q, t)
    r_visc = np.zeros(V.dim)
    r_flux = np.zeros(V.dim)
    rhs_p = np.zeros(Q.dim)
    ns = V.ns
    for fi in facets.boundary_facets:
        f = facets.facets[fi]
        pa, pb = V.mesh.vertices[f.vertices[0]], V.mesh.vertices[f.vertices[1]]
        x = pa + np.outer(t, pb - pa)
        g = np.asarray(g_D(x), dtype=float)  # (nq, 2)
        gn = g @ f.normal
        wq = w * f.length
        (dofs, vals, dn, _), = _side_data(V, vtraces, f, need_grads=True)
        for c in range(2):
            d = dofs[c * ns : (c + 1) * ns]
            r_visc[d] += (sigma / f.length) * (vals @ (wq * g[:, c])) - dn @ (wq * g[:, c])
            r_flux[d] += (1.0 / f.length) * f.normal[c] * (vals @ (wq * gn))
        (qdofs, qvals, _, _), = _side_data(Q, qtraces, f)
        rhs_p[qdofs] += qvals @ (wq * gn)
    return r_visc, r_flux, rhs_p


def assemble_weak_dirichlet(
    V: FeSpace,
    Q: FeSpace,
    facets: FacetTopology,
    params: StabilizationParams,
    g_D,
    deg: Optional[int] = None,
):
    """Right-hand side increments (rhs_u, rhs_p) from weak Dirichlet data,
    with nu and gamma folded in."""
    r_visc, r_flux, rhs_p = weak_dirichlet_parts(V, Q, facets, params.sigma, g_D, deg)
    return params.nu * r_visc + params.gamma * r_flux, rhs_p


def assemble_pressure_mean(Q: FeSpace, deg: Optional[int] = None) -> np.ndarray:
    rule = reference_rule(Q.mesh.cell_kind, _vol_degree(Q, deg))
    vals, _ = Q.basis.eval(rule.points)
    m = np.zeros(Q.dim)
    for c in range(Q.mesh.num_cells):
        _, det, _ = cell_jacobians(Q.mesh, c, rule.points)
        m[Q.cell_dofs(c)] += vals @ (rule.weights * det)
    return m


def assemble_energy_matrix(
    space: FeSpace, facets: FacetTopology, sigma: float
) -> sparse.csr_matrix:
    """Gram matrix of the discrete energy norm: broken gradients plus
    sigma/h_F-weighted full-vector jump penalty (no consistency terms)."""
    A = assemble_gradgrad(space)
    rule = interval_rule(_facet_degree(space, None))
    t, w = rule.points, rule.weights
    traces = _FacetTraces(space, t)
    acc = _Coo()
    ns = space.ns
    for f in facets.facets:
        sides = _side_data(space, traces, f)
        J = np.concatenate([sign * vals for _, vals, _, sign in sides])
        block = (sigma / f.length) * (J * (w * f.length)) @ J.T
        for comp in range(space.ncomp):
            d = np.concatenate([dofs[comp * ns : (comp + 1) * ns] for dofs, _, _, _ in sides])
            acc.add(d, d, block)
    return (A + acc.build((space.dim, space.dim))).tocsr()
