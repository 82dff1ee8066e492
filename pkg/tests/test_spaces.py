import math

import numpy as np
import pytest

from dgflow.mesh import (
    build_facet_topology,
    build_structured_quad_mesh,
    build_structured_triangle_mesh,
)
from dgflow.quadrature import reference_rule
from dgflow.spaces import (
    CRBasis,
    SpaceConfig,
    _scalar_basis,
    build_normal_constraints,
    build_space,
    cell_jacobians,
    eval_basis,
    interpolate_bdm,
    l2_project_pressure,
    map_to_physical,
)


def test_space_config_validation():
    SpaceConfig("Pk_dc_vector", 3)
    with pytest.raises(ValueError):
        SpaceConfig("Pk_dc_vector", 7)
    with pytest.raises(ValueError):
        SpaceConfig("CR_vector", 2)
    with pytest.raises(ValueError):
        SpaceConfig("P0_scalar", 1)
    with pytest.raises(ValueError):
        SpaceConfig("nodal_lagrange", 1)


@pytest.mark.parametrize("kind,deg", [("triangle", 1), ("triangle", 4), ("triangle", 6),
                                      ("quadrilateral", 1), ("quadrilateral", 4)])
def test_orthonormality(kind, deg):
    basis = _scalar_basis(kind, deg)
    rule = reference_rule(kind, 2 * deg + 2)
    vals, _ = basis.eval(rule.points)
    G = (vals * rule.weights) @ vals.T
    assert np.abs(G - np.eye(basis.size)).max() < 1e-9


def test_gradients_match_finite_differences():
    basis = _scalar_basis("triangle", 3)
    rng = np.random.default_rng(3)
    pts = rng.uniform(0.05, 0.4, size=(5, 2))
    vals, grads = basis.eval(pts)
    eps = 1e-6
    for d in range(2):
        shift = np.zeros(2)
        shift[d] = eps
        vp, _ = basis.eval(pts + shift)
        vm, _ = basis.eval(pts - shift)
        fd = (vp - vm) / (2 * eps)
        assert np.abs(fd - grads[:, :, d]).max() < 1e-8


def test_space_dimensions():
    m = build_structured_triangle_mesh(32)
    V = build_space(m, SpaceConfig("Pk_dc_vector", 3))
    assert V.dim == 2048 * 2 * 10 == 40960
    mq = build_structured_quad_mesh(4)
    Vq = build_space(mq, SpaceConfig("Qk_dc_vector", 2))
    assert Vq.dim == 16 * 2 * 9
    mt = build_structured_triangle_mesh(1)
    cr = build_space(mt, SpaceConfig("CR_vector", 1))
    assert cr.dim == 2 * 5  # one dof per facet per component


def test_q1_span_reproduces_bilinear_nodal_values():
    """The modal Q1 basis spans the bilinear hat functions; check the published
    nodal values at (0.25, 0.75) through an exact change of basis."""
    m = build_structured_quad_mesh(1)
    S = build_space(m, SpaceConfig("Qk_dc_scalar", 1))
    corners = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    vals_c, _ = S.basis.eval(corners)  # (ns, 4)
    target = np.eye(4)  # hat i = 1 at corner i
    coeffs = np.linalg.solve(vals_c.T, target)  # columns: hat functions
    vals_p, _ = S.basis.eval(np.array([[0.25, 0.75]]))
    hats = coeffs.T @ vals_p[:, 0]
    assert np.allclose(hats, [0.1875, 0.0625, 0.1875, 0.5625], atol=1e-13)


def test_p1_span_reproduces_barycentric_values():
    S = build_space(build_structured_triangle_mesh(1), SpaceConfig("Pk_dc_scalar", 1))
    verts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    vals_v, _ = S.basis.eval(verts)
    coeffs = np.linalg.solve(vals_v.T, np.eye(3))
    vals_c, _ = S.basis.eval(np.array([[1 / 3, 1 / 3]]))
    assert np.allclose(coeffs.T @ vals_c[:, 0], [1 / 3, 1 / 3, 1 / 3], atol=1e-13)


def test_cr_basis_midpoint_nodal():
    basis = CRBasis()
    mids = np.array([[0.5, 0.0], [0.5, 0.5], [0.0, 0.5]])  # edge midpoints in edge order
    vals, _ = basis.eval(mids)
    assert np.allclose(vals, np.eye(3), atol=1e-14)


def test_eval_basis_vector_layout():
    m = build_structured_triangle_mesh(1)
    V = build_space(m, SpaceConfig("Pk_dc_vector", 2))
    pts = np.array([[0.2, 0.3]])
    vals, grads = eval_basis(V, 0, pts)
    assert vals.shape == (V.nloc, 1, 2)
    assert grads.shape == (V.nloc, 1, 2, 2)
    ns = V.ns
    assert np.all(vals[:ns, :, 1] == 0) and np.all(vals[ns:, :, 0] == 0)


def test_bilinear_geometry():
    """Non-affine quad: jacobian varies, physical map hits the vertices."""
    from dgflow.mesh import load_mesh

    m = load_mesh("""vertices 4
0 0
2 0
1.5 1.2
0 1
cells 1 quad
0 1 2 3
""")
    ref = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    assert np.allclose(map_to_physical(m, 0, ref), m.vertices)
    J, det, Jinv = cell_jacobians(m, 0, ref)
    assert np.all(det > 0)
    assert not np.allclose(det, det[0])
    assert np.allclose(np.einsum("nij,njk->nik", J, Jinv), np.broadcast_to(np.eye(2), (4, 2, 2)), atol=1e-13)


# ---------------------------------------------------------------------------
# normal-continuity constraints


def test_constraint_rank_and_constrained_dimension():
    """2-triangle mesh, k=1: 10 independent constraint rows leave a constrained
    space of dimension dim V_h - rank = 12 - 10 = 2, matching the counting
    identity #cells (k+1)(k+2) - (k+1) #facets."""
    m = build_structured_triangle_mesh(1)
    V = build_space(m, SpaceConfig("Pk_dc_vector", 1))
    C = build_normal_constraints(V, V.facets)
    L = C.matrix.toarray()
    assert L.shape == (10, 12)
    assert np.linalg.matrix_rank(L, tol=1e-10) == 10
    k = 1
    expected = m.num_cells * (k + 1) * (k + 2) - (k + 1) * V.facets.num_facets
    assert V.dim - 10 == expected == 2


@pytest.mark.parametrize("k", [1, 2, 3])
def test_constraint_dimension_identity(k):
    m = build_structured_triangle_mesh(3)
    V = build_space(m, SpaceConfig("Pk_dc_vector", k))
    C = build_normal_constraints(V, V.facets)
    rank = np.linalg.matrix_rank(C.matrix.toarray(), tol=1e-9)
    assert rank == C.num_rows == (k + 1) * V.facets.num_facets
    assert V.dim - rank == m.num_cells * (k + 1) * (k + 2) - (k + 1) * V.facets.num_facets


def test_constant_field_constraint_residuals():
    """A globally constant field has zero interior normal jumps; only boundary
    rows with n not orthogonal to the field survive."""
    m = build_structured_triangle_mesh(2)
    V = build_space(m, SpaceConfig("Pk_dc_vector", 1))
    C = build_normal_constraints(V, V.facets)
    coeffs = np.zeros(V.dim)
    for c in range(m.num_cells):
        d = V.cell_dofs(c)
        area = abs(m.signed_areas()[c])
        coeffs[d[0]] = math.sqrt(area)  # constant-mode coefficient, component 0
    res = C.residual(coeffs)
    nmom = C.rows_per_facet
    for fi, f in enumerate(V.facets.facets):
        block = res[fi * nmom : (fi + 1) * nmom]
        if f.minus_cell is not None or abs(f.normal[0]) < 1e-14:
            assert np.abs(block).max() < 1e-13
        else:
            assert np.abs(block).max() > 1e-3


def test_constraints_require_pk_vector():
    m = build_structured_quad_mesh(2)
    V = build_space(m, SpaceConfig("Qk_dc_vector", 1))
    with pytest.raises(ValueError):
        build_normal_constraints(V, V.facets)


# ---------------------------------------------------------------------------
# BDM interpolation and the commuting diagram


def _poly_field(rng, k):
    cu = rng.standard_normal((2, k + 1, k + 1))

    def u(x):
        vx = sum(cu[0, a, b] * x[:, 0] ** a * x[:, 1] ** b
                 for a in range(k + 1) for b in range(k + 1 - a))
        vy = sum(cu[1, a, b] * x[:, 0] ** a * x[:, 1] ** b
                 for a in range(k + 1) for b in range(k + 1 - a))
        return np.column_stack([vx, vy])

    def divu(x):
        dx = sum(a * cu[0, a, b] * x[:, 0] ** (a - 1) * x[:, 1] ** b
                 for a in range(1, k + 1) for b in range(k + 1 - a))
        dy = sum(b * cu[1, a, b] * x[:, 0] ** a * x[:, 1] ** (b - 1)
                 for a in range(k + 1) for b in range(1, k + 1 - a))
        return dx + dy if k >= 1 else np.zeros(x.shape[0])

    return u, divu


@pytest.mark.parametrize("k", [1, 2, 3])
def test_commuting_diagram(k):
    """div(BDM interpolant) equals the L2 projection of div, cellwise."""
    m = build_structured_triangle_mesh(3)
    V = build_space(m, SpaceConfig("Pk_dc_vector", k))
    Q = build_space(m, SpaceConfig("Pk_dc_scalar", k - 1), V.facets)
    rng = np.random.default_rng(100 + k)
    rule = reference_rule("triangle", 2 * k + 2)
    qvals, _ = Q.basis.eval(rule.points)
    _, ref_grads = V.basis.eval(rule.points)
    for trial in range(20):
        u, divu = _poly_field(rng, k)
        bdm = interpolate_bdm(V, u, data_degree=2 * k + 4)
        pdiv = l2_project_pressure(Q, divu, data_degree=2 * k + 4)
        scale = max(np.abs(bdm).max(), 1.0)
        for c in range(m.num_cells):
            g = V.cell_gradients(c, rule.points, ref_grads)
            dofs = V.cell_dofs(c)
            div_h = bdm[dofs[: V.ns]] @ g[:, :, 0] + bdm[dofs[V.ns :]] @ g[:, :, 1]
            p_h = pdiv[Q.cell_dofs(c)] @ qvals
            assert np.abs(div_h - p_h).max() <= 1e-11 * scale


def test_bdm_reproduces_constrained_fields():
    """Interpolating a normal-continuous discrete field returns its own coefficients."""
    k = 2
    m = build_structured_triangle_mesh(2)
    V = build_space(m, SpaceConfig("Pk_dc_vector", k))
    C = build_normal_constraints(V, V.facets)
    # project a random coefficient vector onto the constrained subspace
    rng = np.random.default_rng(11)
    w = rng.standard_normal(V.dim)
    L = C.matrix.toarray()
    w -= L.T @ np.linalg.lstsq(L @ L.T, L @ w, rcond=None)[0]
    assert np.abs(C.residual(w)).max() < 1e-10

    vals_cache = {}

    def u(x):
        # evaluate the discrete field: locate the cell containing each point
        out = np.zeros((x.shape[0], 2))
        for c in range(m.num_cells):
            verts = m.vertices[m.cells[c]]
            A = np.column_stack([verts[1] - verts[0], verts[2] - verts[0]])
            lam = np.linalg.solve(A, (x - verts[0]).T).T
            inside = (lam[:, 0] >= -1e-12) & (lam[:, 1] >= -1e-12) & (lam.sum(1) <= 1 + 1e-12)
            if not inside.any():
                continue
            vals, _ = V.basis.eval(lam[inside])
            dofs = V.cell_dofs(c)
            out[inside, 0] = w[dofs[: V.ns]] @ vals
            out[inside, 1] = w[dofs[V.ns :]] @ vals
        return out

    bdm = interpolate_bdm(V, u, data_degree=2 * k + 4)
    assert np.abs(bdm - w).max() <= 1e-12 * max(np.abs(w).max(), 1.0) * 100


def test_bdm_facet_moments_match_field():
    """Boundary rows of the constraint functionals applied to the interpolant
    agree with the facet moments of the smooth field's normal trace."""
    k = 2
    m = build_structured_triangle_mesh(2)
    V = build_space(m, SpaceConfig("Pk_dc_vector", k))
    C = build_normal_constraints(V, V.facets)

    def u(x):
        return np.column_stack([np.sin(x[:, 0] + 2 * x[:, 1]), np.cos(x[:, 0] - x[:, 1])])

    bdm = interpolate_bdm(V, u, data_degree=20)
    res = C.residual(bdm)
    mom = C.moments_of_field(u, quad_degree=20)
    nmom = C.rows_per_facet
    for fi, f in enumerate(V.facets.facets):
        block = slice(fi * nmom, (fi + 1) * nmom)
        if f.minus_cell is not None:
            assert np.abs(res[block]).max() < 1e-12  # interior jumps vanish
        else:
            assert np.allclose(res[block], mom[block], atol=1e-12)


def test_l2_projection_reproduces_polynomials():
    m = build_structured_quad_mesh(2)
    Q = build_space(m, SpaceConfig("Qk_dc_scalar", 2))
    coeffs = l2_project_pressure(Q, lambda x: x[:, 0] ** 2 * x[:, 1] ** 2, data_degree=8)
    rule = reference_rule("quadrilateral", 6)
    vals, _ = Q.basis.eval(rule.points)
    for c in range(m.num_cells):
        x = map_to_physical(m, c, rule.points)
        ph = coeffs[Q.cell_dofs(c)] @ vals
        assert np.abs(ph - x[:, 0] ** 2 * x[:, 1] ** 2).max() < 1e-13
