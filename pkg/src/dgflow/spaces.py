"""Reference bases and global dof maps for the finite element families used here.

Scalar DG bases are L2-orthonormalized monomials on the reference cell; the
orthonormalization coefficients come from an exact rational LDL^T of the
monomial Gram matrix, so conditioning stays benign up to degree 6.

Also houses the normal-continuity constraint machinery (moments of the normal
jump against facet Legendre polynomials) and the BDM-style interpolation whose
divergence commutes with the pressure L2-projection.
"""

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np

from .mesh import (
    _LOCAL_EDGES,
    QUADRILATERAL,
    TRIANGLE,
    FacetTopology,
    Mesh,
    build_facet_topology,
)
from .quadrature import interval_rule, reference_rule

VECTOR_FAMILIES = ("Pk_dc_vector", "Qk_dc_vector", "CR_vector")
SCALAR_FAMILIES = ("Pk_dc_scalar", "Qk_dc_scalar", "P0_scalar")

_REF_VERTICES = {
    TRIANGLE: np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
    QUADRILATERAL: np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]),
}

MAX_DEGREE = 6


@dataclass(frozen=True)
class SpaceConfig:
    family: str
    degree: int

    def __post_init__(self):
        if self.family not in VECTOR_FAMILIES + SCALAR_FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.family == "CR_vector" and self.degree != 1:
            raise ValueError("CR_vector requires degree 1")
        if self.family == "P0_scalar" and self.degree != 0:
            raise ValueError("P0_scalar requires degree 0")
        if not (0 <= self.degree <= MAX_DEGREE):
            raise ValueError(f"degree {self.degree} outside supported range 0..{MAX_DEGREE}")


def _rational_orthonormalizer(gram):
    """C (float) with C G C^T = I, from exact LDL^T of the rational Gram matrix."""
    n = len(gram)
    L = [[Fraction(0)] * n for _ in range(n)]
    D = [Fraction(0)] * n
    for i in range(n):
        for j in range(i):
            s = gram[i][j] - sum(L[i][k] * L[j][k] * D[k] for k in range(j))
            L[i][j] = s / D[j]
        d = gram[i][i] - sum(L[i][k] ** 2 * D[k] for k in range(i))
        if d <= 0:
            raise RuntimeError("monomial Gram matrix not positive definite")
        D[i] = d
        L[i][i] = Fraction(1)
    # forward-substitute for L^{-1}
    Linv = [[Fraction(1) if i == j else Fraction(0) for j in range(n)] for i in range(n)]
    for i in range(n):
        for j in range(i):
            s = sum(L[i][k] * Linv[k][j] for k in range(j, i))
            Linv[i][j] = -s
    C = np.array([[float(Linv[i][j]) for j in range(n)] for i in range(n)])
    scale = np.array([1.0 / math.sqrt(float(d)) for d in D])
    return scale[:, None] * C


class MonomialBasis:
    """Orthonormal scalar basis on the reference triangle or square."""

    def __init__(self, cell_kind: str, degree: int):
        self.cell_kind = cell_kind
        self.degree = degree
        if cell_kind == TRIANGLE:
            exps = [(d - b, b) for d in range(degree + 1) for b in range(d + 1)]
            gram = [
                [_tri_monomial_integral(a1 + a2, b1 + b2) for (a2, b2) in exps]
                for (a1, b1) in exps
            ]
        elif cell_kind == QUADRILATERAL:
            exps = sorted(
                ((a, b) for a in range(degree + 1) for b in range(degree + 1)),
                key=lambda e: (e[0] + e[1], e[0]),
            )
            gram = [
                [Fraction(1, (a1 + a2 + 1) * (b1 + b2 + 1)) for (a2, b2) in exps]
                for (a1, b1) in exps
            ]
        else:
            raise ValueError(f"unknown cell kind {cell_kind!r}")
        self.exponents = np.asarray(exps, dtype=np.int64)
        self.coeffs = _rational_orthonormalizer(gram)
        self.size = len(exps)

    def eval(self, points: np.ndarray):
        """Values (ns, np) and reference gradients (ns, np, 2) at reference points."""
        pts = np.atleast_2d(points)
        x, y = pts[:, 0], pts[:, 1]
        a = self.exponents[:, 0][:, None]
        b = self.exponents[:, 1][:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            mono = x[None, :] ** a * y[None, :] ** b
            dx = np.where(a > 0, a * x[None, :] ** np.maximum(a - 1, 0) * y[None, :] ** b, 0.0)
            dy = np.where(b > 0, b * x[None, :] ** a * y[None, :] ** np.maximum(b - 1, 0), 0.0)
        vals = self.coeffs @ mono
        grads = np.stack([self.coeffs @ dx, self.coeffs @ dy], axis=-1)
        return vals, grads


def _tri_monomial_integral(a: int, b: int) -> Fraction:
    # int over unit triangle of x^a y^b
    return Fraction(math.factorial(a) * math.factorial(b), math.factorial(a + b + 2))


class CRBasis:
    """Crouzeix-Raviart scalar basis on the reference triangle, one function per edge."""

    cell_kind = TRIANGLE
    degree = 1
    size = 3

    def eval(self, points: np.ndarray):
        pts = np.atleast_2d(points)
        x, y = pts[:, 0], pts[:, 1]
        lam = np.stack([1.0 - x - y, x, y])  # barycentric, vertex order
        dlam = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
        # edge e = (e, e+1 mod 3) is opposite vertex e+2 mod 3
        opp = [2, 0, 1]
        vals = np.stack([1.0 - 2.0 * lam[opp[e]] for e in range(3)])
        grads = np.stack(
            [np.broadcast_to(-2.0 * dlam[opp[e]], (pts.shape[0], 2)).copy() for e in range(3)]
        )
        return vals, grads


@lru_cache(maxsize=None)
def _scalar_basis(cell_kind: str, degree: int) -> MonomialBasis:
    return MonomialBasis(cell_kind, degree)


# ---------------------------------------------------------------------------
# cell geometry


def map_to_physical(mesh: Mesh, cell: int, ref_pts: np.ndarray) -> np.ndarray:
    pts = np.atleast_2d(ref_pts)
    v = mesh.vertices[mesh.cells[cell]]
    if mesh.cell_kind == TRIANGLE:
        return v[0] + np.outer(pts[:, 0], v[1] - v[0]) + np.outer(pts[:, 1], v[2] - v[0])
    xi, eta = pts[:, 0], pts[:, 1]
    N = np.stack([(1 - xi) * (1 - eta), xi * (1 - eta), xi * eta, (1 - xi) * eta])
    return N.T @ v


def cell_jacobians(mesh: Mesh, cell: int, ref_pts: np.ndarray):
    """J (np, 2, 2), det J (np,), J^{-1} (np, 2, 2) at reference points."""
    pts = np.atleast_2d(ref_pts)
    npts = pts.shape[0]
    v = mesh.vertices[mesh.cells[cell]]
    if mesh.cell_kind == TRIANGLE:
        J0 = np.column_stack([v[1] - v[0], v[2] - v[0]])
        J = np.broadcast_to(J0, (npts, 2, 2))
    else:
        xi, eta = pts[:, 0], pts[:, 1]
        dN_dxi = np.stack([-(1 - eta), (1 - eta), eta, -eta])
        dN_deta = np.stack([-(1 - xi), -xi, xi, (1 - xi)])
        J = np.empty((npts, 2, 2))
        J[:, :, 0] = dN_dxi.T @ v
        J[:, :, 1] = dN_deta.T @ v
    det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    Jinv = np.empty_like(J)
    Jinv[:, 0, 0] = J[:, 1, 1]
    Jinv[:, 1, 1] = J[:, 0, 0]
    Jinv[:, 0, 1] = -J[:, 0, 1]
    Jinv[:, 1, 0] = -J[:, 1, 0]
    Jinv /= det[:, None, None]
    return J, det, Jinv


def ref_edge_points(cell_kind: str, local_edge: int, t: np.ndarray, starts_at_a: bool):
    """Reference coordinates along a facet parametrized a->b by t in [0,1]."""
    i, j = _LOCAL_EDGES[cell_kind][local_edge]
    R = _REF_VERTICES[cell_kind]
    r = t if starts_at_a else 1.0 - t
    return R[i] + np.outer(r, R[j] - R[i])


# ---------------------------------------------------------------------------
# finite element space


class FeSpace:
    def __init__(self, mesh: Mesh, config: SpaceConfig, facets: FacetTopology = None):
        kind = mesh.cell_kind
        fam = config.family
        if fam.startswith("Pk") and kind != TRIANGLE:
            raise ValueError("Pk families require a triangular mesh")
        if fam.startswith("Qk") and kind != QUADRILATERAL:
            raise ValueError("Qk families require a quadrilateral mesh")
        if fam == "CR_vector" and kind != TRIANGLE:
            raise ValueError("CR_vector requires a triangular mesh")
        self.mesh = mesh
        self.config = config
        self.facets = facets if facets is not None else build_facet_topology(mesh)
        self.ncomp = 2 if fam in VECTOR_FAMILIES else 1
        if fam == "CR_vector":
            self.basis = CRBasis()
        elif fam == "P0_scalar":
            self.basis = _scalar_basis(kind, 0)
        else:
            self.basis = _scalar_basis(kind, config.degree)
        self.ns = self.basis.size  # scalar functions per cell
        self.nloc = self.ncomp * self.ns
        if fam == "CR_vector":
            self.dim = 2 * self.facets.num_facets
        else:
            self.dim = mesh.num_cells * self.nloc

    @property
    def degree(self) -> int:
        return self.config.degree

    def cell_dofs(self, cell: int) -> np.ndarray:
        """Global dofs: component-0 scalar block first, then component 1."""
        if self.config.family == "CR_vector":
            fidx = self.facets.cell_facets[cell]
            nf = self.facets.num_facets
            return np.concatenate([fidx, nf + fidx])
        return cell * self.nloc + np.arange(self.nloc)

    def cell_gradients(self, cell: int, ref_pts: np.ndarray, ref_grads=None):
        """Physical gradients (ns, np, 2) of the scalar basis."""
        if ref_grads is None:
            _, ref_grads = self.basis.eval(ref_pts)
        _, _, Jinv = cell_jacobians(self.mesh, cell, ref_pts)
        # grad_phys = Jinv^T grad_ref, per point
        return np.einsum("snr,nrp->snp", ref_grads, Jinv)


def build_space(mesh: Mesh, config: SpaceConfig, facets: FacetTopology = None) -> FeSpace:
    return FeSpace(mesh, config, facets)


def eval_basis(space: FeSpace, cell: int, ref_pts: np.ndarray):
    """Per-dof values and physical gradients.

    Scalar spaces: values (nloc, np), gradients (nloc, np, 2).
    Vector spaces: values (nloc, np, 2), gradients (nloc, np, 2, 2) with
    gradients[i, q, c, d] = d/dx_d of component c of dof i.
    """
    vals, ref_grads = space.basis.eval(ref_pts)
    grads = space.cell_gradients(cell, ref_pts, ref_grads)
    if space.ncomp == 1:
        return vals, grads
    ns, npts = vals.shape
    vvals = np.zeros((2 * ns, npts, 2))
    vgrads = np.zeros((2 * ns, npts, 2, 2))
    for c in range(2):
        vvals[c * ns : (c + 1) * ns, :, c] = vals
        vgrads[c * ns : (c + 1) * ns, :, c, :] = grads
    return vvals, vgrads


# ---------------------------------------------------------------------------
# facet Legendre moments and normal-continuity constraints


def _facet_legendre(t: np.ndarray, nmom: int) -> np.ndarray:
    """Rows j = 0..nmom-1: sqrt(2j+1) P_j(2t-1), orthonormal on [0,1]."""
    out = np.empty((nmom, t.shape[0]))
    x = 2.0 * t - 1.0
    p_prev, p = np.zeros_like(x), np.ones_like(x)
    for j in range(nmom):
        out[j] = math.sqrt(2 * j + 1) * p
        p_next = ((2 * j + 1) * x * p - j * p_prev) / (j + 1)
        p_prev, p = p, p_next
    return out


@dataclass
class NormalContinuityConstraints:
    space: FeSpace
    facets: FacetTopology
    matrix: "object"  # scipy.sparse CSR, (rows_per_facet * num_facets, space.dim)
    rows_per_facet: int

    @property
    def num_rows(self) -> int:
        return self.matrix.shape[0]

    def residual(self, coeffs: np.ndarray) -> np.ndarray:
        return self.matrix @ coeffs

    def moments_of_field(self, u, quad_degree: int = None) -> np.ndarray:
        """The same facet functionals applied to a smooth vector field u(x)."""
        k = self.space.degree
        rule = interval_rule(quad_degree if quad_degree is not None else 2 * k + 7)
        t, w = rule.points, rule.weights
        leg = _facet_legendre(t, self.rows_per_facet)
        mesh = self.space.mesh
        out = np.zeros(self.num_rows)
        for fi, f in enumerate(self.facets.facets):
            pa, pb = mesh.vertices[f.vertices[0]], mesh.vertices[f.vertices[1]]
            x = pa + np.outer(t, pb - pa)
            un = np.asarray(u(x)) @ f.normal
            scale = f.length / math.sqrt(f.length)  # ds = h_F dt, 1/sqrt(h_F) normalization
            r0 = fi * self.rows_per_facet
            out[r0 : r0 + self.rows_per_facet] = scale * (leg * (w * un)[None, :]).sum(axis=1)
        return out


def build_normal_constraints(space: FeSpace, facets: FacetTopology) -> NormalContinuityConstraints:
    from scipy import sparse

    if space.config.family != "Pk_dc_vector":
        raise ValueError("normal-continuity constraints require a Pk_dc_vector space")
    k = space.degree
    nmom = k + 1
    rule = interval_rule(2 * k + 1)
    t, w = rule.points, rule.weights
    leg = _facet_legendre(t, nmom)
    kind = space.mesh.cell_kind
    ns = space.ns

    rows, cols, vals = [], [], []
    for fi, f in enumerate(facets.facets):
        scale = f.length / math.sqrt(f.length)
        sides = [(f.plus_cell, f.plus_local, True, 1.0)]
        if f.minus_cell is not None:
            sides.append((f.minus_cell, f.minus_local, f.minus_starts_at_a, -1.0))
        plus_block = None
        for cell, le, starts_at_a, sign in sides:
            ref = ref_edge_points(kind, le, t, starts_at_a)
            phi, _ = space.basis.eval(ref)  # (ns, nq)
            # moment block (nmom, ns): int phi_i q_j ds
            mom = scale * leg @ (w[:, None] * phi.T)
            if sign > 0:
                plus_block = mom
            dofs = space.cell_dofs(cell)
            for c in range(2):
                block = sign * f.normal[c] * mom
                for j in range(nmom):
                    rows.extend([fi * nmom + j] * ns)
                    cols.extend(dofs[c * ns : (c + 1) * ns])
                    vals.extend(block[j])
        # trace of P_k(K) onto the facet must span P_k(F)
        sv = np.linalg.svd(plus_block, compute_uv=False)
        if sv[-1] < 1e-10 * max(sv[0], 1.0):
            raise RuntimeError(f"facet {fi}: degenerate normal-moment block")

    L = sparse.coo_matrix(
        (vals, (rows, cols)), shape=(nmom * facets.num_facets, space.dim)
    ).tocsr()
    return NormalContinuityConstraints(space, facets, L, nmom)


# ---------------------------------------------------------------------------
# pressure projection and BDM interpolation


def l2_project_pressure(space: FeSpace, f, data_degree: int = None) -> np.ndarray:
    """Cellwise L2 projection of a scalar field onto a scalar DG space."""
    if space.ncomp != 1:
        raise ValueError("l2_project_pressure expects a scalar space")
    k = space.degree
    deg = data_degree if data_degree is not None else 2 * k + 6
    rule = reference_rule(space.mesh.cell_kind, max(deg, 2 * k))
    vals, _ = space.basis.eval(rule.points)
    coeffs = np.zeros(space.dim)
    for c in range(space.mesh.num_cells):
        _, det, _ = cell_jacobians(space.mesh, c, rule.points)
        wdet = rule.weights * det
        M = (vals * wdet) @ vals.T
        x = map_to_physical(space.mesh, c, rule.points)
        fx = np.asarray(f(x), dtype=float)
        rhs = vals @ (wdet * fx)
        try:
            coeffs[space.cell_dofs(c)] = np.linalg.solve(M, rhs)
        except np.linalg.LinAlgError as exc:
            raise RuntimeError(f"singular mass matrix on cell {c}") from exc
    return coeffs


def interpolate_bdm(space: FeSpace, u, data_degree: int = None) -> np.ndarray:
    """BDM-style interpolation of a smooth vector field into the normal-continuous
    subspace of a Pk_dc_vector space on triangles.

    Dofs per cell: facet moments of v.n against P_k(F), interior moments against
    gradients of P_{k-1}(K) and against curls of bubble-weighted P_{k-2}(K).
    The divergence of the result equals the pressure-space L2 projection of
    div u, cellwise.
    """
    if space.config.family != "Pk_dc_vector":
        raise ValueError("interpolate_bdm requires a Pk_dc_vector space on triangles")
    k = space.degree
    if k < 1:
        raise ValueError("BDM interpolation requires degree >= 1")
    mesh, facets = space.mesh, space.facets
    ns, nloc = space.ns, space.nloc
    ddeg = data_degree if data_degree is not None else 2 * k + 7

    edge_rule = interval_rule(max(2 * k + 1, ddeg))
    t, wt = edge_rule.points, edge_rule.weights
    leg = _facet_legendre(t, k + 1)
    vol_rule = reference_rule(TRIANGLE, max(2 * k + 2, ddeg))
    vp, wv = vol_rule.points, vol_rule.weights
    phi, _ = space.basis.eval(vp)  # (ns, nq)

    grad_basis = _scalar_basis(TRIANGLE, k - 1)
    _, ggrads = grad_basis.eval(vp)  # (m, nq, 2); skip index 0 (constant)
    n_grad = grad_basis.size - 1

    n_curl = 0
    if k >= 2:
        curl_basis = _scalar_basis(TRIANGLE, k - 2)
        cvals, cgrads = curl_basis.eval(vp)
        n_curl = curl_basis.size
        xi, eta = vp[:, 0], vp[:, 1]
        bub = xi * eta * (1.0 - xi - eta)
        dbub = np.stack([eta * (1 - 2 * xi - eta), xi * (1 - xi - 2 * eta)], axis=-1)
        # reference gradient of bubble * q, shape (n_curl, nq, 2)
        bq_grads = cvals[:, :, None] * dbub[None] + bub[None, :, None] * cgrads

    assert 3 * (k + 1) + n_grad + n_curl == nloc

    coeffs = np.zeros(space.dim)
    for c in range(mesh.num_cells):
        M = np.zeros((nloc, nloc))
        rhs = np.zeros(nloc)
        row = 0
        for le in range(3):
            f = facets.facets[facets.cell_facets[c, le]]
            starts_at_a = True if f.plus_cell == c and f.plus_local == le else f.minus_starts_at_a
            ref = ref_edge_points(TRIANGLE, le, t, starts_at_a)
            tr, _ = space.basis.eval(ref)  # (ns, nq)
            pa, pb = mesh.vertices[f.vertices[0]], mesh.vertices[f.vertices[1]]
            x = pa + np.outer(t, pb - pa)
            un = np.asarray(u(x)) @ f.normal
            mom = f.length * leg @ (wt[:, None] * tr.T)  # (k+1, ns)
            for cc in range(2):
                M[row : row + k + 1, cc * ns : (cc + 1) * ns] = f.normal[cc] * mom
            rhs[row : row + k + 1] = f.length * leg @ (wt * un)
            row += k + 1

        _, det, Jinv = cell_jacobians(mesh, c, vp)
        wdet = wv * det
        x = map_to_physical(mesh, c, vp)
        ux = np.asarray(u(x), dtype=float)  # (nq, 2)

        gq = np.einsum("mnr,nrp->mnp", ggrads[1:], Jinv)  # physical grad q, (n_grad, nq, 2)
        for m in range(n_grad):
            for cc in range(2):
                M[row, cc * ns : (cc + 1) * ns] = phi @ (wdet * gq[m, :, cc])
            rhs[row] = wdet @ (ux[:, 0] * gq[m, :, 0] + ux[:, 1] * gq[m, :, 1])
            row += 1

        if n_curl:
            gbq = np.einsum("mnr,nrp->mnp", bq_grads, Jinv)
            curl = np.stack([gbq[:, :, 1], -gbq[:, :, 0]], axis=-1)  # (n_curl, nq, 2)
            for m in range(n_curl):
                for cc in range(2):
                    M[row, cc * ns : (cc + 1) * ns] = phi @ (wdet * curl[m, :, cc])
                rhs[row] = wdet @ (ux[:, 0] * curl[m, :, 0] + ux[:, 1] * curl[m, :, 1])
                row += 1

        try:
            coeffs[space.cell_dofs(c)] = np.linalg.solve(M, rhs)
        except np.linalg.LinAlgError as exc:
            raise RuntimeError(f"singular BDM dof system on cell {c}") from exc
    return coeffs
