"""Independent brute-force reference implementation for tiny systems.

Everything here is assembled entry-by-entry with plain Python loops and its own
facet geometry, sharing only the reference basis definition with the production
code (coefficients would otherwise not be comparable).  Dense linear algebra
throughout.  Intended for 1-2 cell meshes at k = 1; do not use for real runs.
"""

import numpy as np

from .mesh import _LOCAL_EDGES, Mesh
from .quadrature import interval_rule, reference_rule
from .spaces import _REF_VERTICES, FeSpace, cell_jacobians, map_to_physical


def _cell_centroid(mesh, c):
    return mesh.vertices[mesh.cells[c]].mean(axis=0)


def _find_facets(mesh):
    """(a, b, plus, minus, normal, length, ...) tuples, derived from scratch."""
    edges = _LOCAL_EDGES[mesh.cell_kind]
    seen = {}
    for c in range(mesh.num_cells):
        for le, (i, j) in enumerate(edges):
            vi, vj = int(mesh.cells[c][i]), int(mesh.cells[c][j])
            key = (min(vi, vj), max(vi, vj))
            seen.setdefault(key, []).append(c)
    out = []
    for (va, vb), cells in sorted(seen.items()):
        cells = sorted(cells)
        pa, pb = mesh.vertices[va], mesh.vertices[vb]
        tvec = pb - pa
        length = float(np.hypot(*tvec))
        n = np.array([tvec[1], -tvec[0]]) / length
        mid = 0.5 * (pa + pb)
        # orient outward from the plus (lower-index) cell
        if n @ (mid - _cell_centroid(mesh, cells[0])) < 0:
            n = -n
        minus = cells[1] if len(cells) == 2 else None
        out.append((va, vb, cells[0], minus, n, length))
    return out


def _ref_coords_of(mesh, c, x):
    """Invert the (affine or bilinear) cell map for points x on an edge."""
    v = mesh.vertices[mesh.cells[c]]
    if mesh.cell_kind == "triangle":
        A = np.column_stack([v[1] - v[0], v[2] - v[0]])
        return np.linalg.solve(A, (x - v[0]).T).T
    # bilinear: Newton from the center
    ref = np.full_like(x, 0.5)
    for _ in range(50):
        J, _, Jinv = cell_jacobians(mesh, c, ref)
        r = map_to_physical(mesh, c, ref) - x
        ref = ref - np.einsum("nij,nj->ni", Jinv, r)
    return ref


def _trace(space: FeSpace, c, x):
    """Scalar basis values and physical gradients of cell c at physical points x."""
    ref = _ref_coords_of(space.mesh, c, x)
    vals, ref_grads = space.basis.eval(ref)
    grads = space.cell_gradients(c, ref, ref_grads)
    return vals, grads


def dense_operators(V: FeSpace, Q: FeSpace, sigma: float):
    """Dense (A_sip, J_flux, GD, B, m) assembled entry-wise."""
    mesh = V.mesh
    ns = V.ns
    nd, nq = V.dim, Q.dim
    A = np.zeros((nd, nd))
    J = np.zeros((nd, nd))
    GD = np.zeros((nd, nd))
    B = np.zeros((nq, nd))
    m = np.zeros(nq)
    vol = reference_rule(mesh.cell_kind, 2 * V.degree + 4)

    def vdof(c, comp, i):
        return int(V.cell_dofs(c)[comp * ns + i])

    for c in range(mesh.num_cells):
        _, det, _ = cell_jacobians(mesh, c, vol.points)
        vals, ref_grads = V.basis.eval(vol.points)
        grads = V.cell_gradients(c, vol.points, ref_grads)
        qvals, _ = Q.basis.eval(vol.points)
        for q in range(vol.points.shape[0]):
            w = vol.weights[q] * det[q]
            for comp in range(2):
                for i in range(ns):
                    for j in range(ns):
                        A[vdof(c, comp, i), vdof(c, comp, j)] += w * (
                            grads[i, q] @ grads[j, q]
                        )
            for i in range(2 * ns):
                di = grads[i % ns, q, i // ns]  # d(phi)/dx_comp for component comp
                for j in range(2 * ns):
                    dj = grads[j % ns, q, j // ns]
                    GD[vdof(c, i // ns, i % ns), vdof(c, j // ns, j % ns)] += w * di * dj
                for iq in range(Q.ns):
                    B[int(Q.cell_dofs(c)[iq]), vdof(c, i // ns, i % ns)] += (
                        -w * qvals[iq, q] * di
                    )
            for iq in range(Q.ns):
                m[int(Q.cell_dofs(c)[iq])] += w * qvals[iq, q]

    line = interval_rule(2 * V.degree + 4)
    for (va, vb, plus, minus, n, length) in _find_facets(mesh):
        pa, pb = mesh.vertices[va], mesh.vertices[vb]
        x = pa + np.outer(line.points, pb - pa)
        sides = [(plus, 1.0)] + ([(minus, -1.0)] if minus is not None else [])
        tr = {c: _trace(V, c, x) for c, _ in sides}
        qtr = {c: _trace(Q, c, x)[0] for c, _ in sides}
        avg = 1.0 / len(sides)
        for q in range(x.shape[0]):
            w = line.weights[q] * length
            # enumerate (cell, sign, comp, i) dofs touching this facet
            dofs = [
                (c, sgn, comp, i)
                for c, sgn in sides
                for comp in range(2)
                for i in range(ns)
            ]
            for (ci, si, compi, ii) in dofs:
                vi = si * tr[ci][0][ii, q]  # jump contribution of dof i
                dni = avg * (tr[ci][1][ii, q] @ n)  # average normal derivative
                gi = vdof(ci, compi, ii)
                for (cj, sj, compj, jj) in dofs:
                    vj = sj * tr[cj][0][jj, q]
                    dnj = avg * (tr[cj][1][jj, q] @ n)
                    gj = vdof(cj, compj, jj)
                    if compi == compj:
                        A[gi, gj] += w * (
                            (sigma / length) * vi * vj - dni * vj - vi * dnj
                        )
                    J[gi, gj] += (w / length) * (vi * n[compi]) * (vj * n[compj])
                for iq in range(Q.ns):
                    for cj, _ in sides:
                        B[int(Q.cell_dofs(cj)[iq]), gi] += (
                            w * avg * qtr[cj][iq, q] * vi * n[compi]
                        )
    return A, J, GD, B, m


def dense_rhs(V: FeSpace, case):
    # same load-quadrature degree as the production default, so that solved
    # coefficients are comparable to roundoff even for non-polynomial data
    vol = reference_rule(V.mesh.cell_kind, 2 * V.degree + 12)
    rhs = np.zeros(V.dim)
    ns = V.ns
    for c in range(V.mesh.num_cells):
        _, det, _ = cell_jacobians(V.mesh, c, vol.points)
        vals, _ = V.basis.eval(vol.points)
        x = map_to_physical(V.mesh, c, vol.points)
        fx = np.asarray(case.f(x), dtype=float)
        for q in range(x.shape[0]):
            w = vol.weights[q] * det[q]
            for comp in range(2):
                for i in range(ns):
                    rhs[int(V.cell_dofs(c)[comp * ns + i])] += w * vals[i, q] * fx[q, comp]
    return rhs


def dense_solve_stokes(V: FeSpace, Q: FeSpace, case, params):
    """Dense bordered solve of the Stokes saddle system (homogeneous BC)."""
    A, J, GD, B, m = dense_operators(V, Q, params.sigma)
    Afull = params.nu * A + params.gamma * J + params.gamma_gd * GD
    nd, nq = V.dim, Q.dim
    K = np.zeros((nd + nq + 1, nd + nq + 1))
    K[:nd, :nd] = Afull
    K[:nd, nd : nd + nq] = B.T
    K[nd : nd + nq, :nd] = B
    K[nd : nd + nq, -1] = m
    K[-1, nd : nd + nq] = m
    b = np.zeros(nd + nq + 1)
    b[:nd] = dense_rhs(V, case)
    x = np.linalg.solve(K, b)
    return x[:nd], x[nd : nd + nq]
