"""2D meshes (structured triangles, structured quads, plain-text import) and facet topology.

Cells are stored counter-clockwise.  Facets carry a unit normal oriented
outward from the lower-index adjacent cell (designated the plus cell),
the facet length h_F, and the local edge index within each adjacent cell.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

TRIANGLE = "triangle"
QUADRILATERAL = "quadrilateral"

# local edges in CCW vertex order
_LOCAL_EDGES = {
    TRIANGLE: ((0, 1), (1, 2), (2, 0)),
    QUADRILATERAL: ((0, 1), (1, 2), (2, 3), (3, 0)),
}


class MeshLoadError(ValueError):
    """Raised when a mesh file cannot be parsed into a valid mesh."""


class TopologyError(RuntimeError):
    """Raised on non-manifold or otherwise broken facet connectivity."""


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray  # (nv, 2)
    cells: np.ndarray  # (nc, 3) or (nc, 4), CCW
    cell_kind: str
    domain_box: tuple  # (xmin, ymin, xmax, ymax)

    @property
    def num_cells(self) -> int:
        return self.cells.shape[0]

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    def cell_diameters(self) -> np.ndarray:
        """h_K: maximum vertex-to-vertex distance within each cell."""
        pts = self.vertices[self.cells]  # (nc, nvc, 2)
        nvc = pts.shape[1]
        h = np.zeros(self.num_cells)
        for i in range(nvc):
            for j in range(i + 1, nvc):
                d = np.linalg.norm(pts[:, i] - pts[:, j], axis=1)
                np.maximum(h, d, out=h)
        return h

    def signed_areas(self) -> np.ndarray:
        pts = self.vertices[self.cells]
        nvc = pts.shape[1]
        a = np.zeros(self.num_cells)
        for i in range(nvc):
            j = (i + 1) % nvc
            a += pts[:, i, 0] * pts[:, j, 1] - pts[:, j, 0] * pts[:, i, 1]
        return 0.5 * a


def _validate(mesh: Mesh) -> Mesh:
    nv = mesh.num_vertices
    if mesh.cells.min(initial=0) < 0 or mesh.cells.max(initial=-1) >= nv:
        raise MeshLoadError("cell references a vertex index out of range")
    areas = mesh.signed_areas()
    if np.any(areas <= 0.0):
        bad = int(np.argmin(areas))
        raise MeshLoadError(f"cell {bad} has non-positive signed area {areas[bad]:.3e}")
    xmin, ymin, xmax, ymax = mesh.domain_box
    diam = float(np.hypot(xmax - xmin, ymax - ymin))
    tree = cKDTree(mesh.vertices)
    pairs = tree.query_pairs(1e-12 * diam)
    if pairs:
        i, j = next(iter(pairs))
        raise MeshLoadError(f"vertices {i} and {j} are closer than 1e-12 x domain diameter")
    if mesh.cell_kind == QUADRILATERAL:
        pts = mesh.vertices[mesh.cells]
        for i in range(4):
            a = pts[:, (i + 1) % 4] - pts[:, i]
            b = pts[:, (i + 2) % 4] - pts[:, (i + 1) % 4]
            cross = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
            if np.any(cross <= 0.0):
                bad = int(np.argmin(cross))
                raise MeshLoadError(f"quadrilateral cell {bad} is not convex")
    return mesh


def build_structured_triangle_mesh(n: int, box=(0.0, 0.0, 1.0, 1.0), diagonal: str = "right") -> Mesh:
    """n x n grid of squares, each split into two triangles.

    diagonal="right" splits along the lower-left-to-upper-right diagonal (the
    default); diagonal="left" along the lower-right-to-upper-left one.  The
    choice changes nothing structurally but shifts approximation constants for
    direction-dependent fields (the published no-flow table matches "left").
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if diagonal not in ("right", "left"):
        raise ValueError(f"diagonal must be 'right' or 'left', got {diagonal!r}")
    xmin, ymin, xmax, ymax = box
    if not (xmax > xmin and ymax > ymin):
        raise ValueError("degenerate bounding box")
    xs = np.linspace(xmin, xmax, n + 1)
    ys = np.linspace(ymin, ymax, n + 1)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):  # column i, row j
        return j * (n + 1) + i

    cells = []
    for j in range(n):
        for i in range(n):
            ll, lr = vid(i, j), vid(i + 1, j)
            ul, ur = vid(i, j + 1), vid(i + 1, j + 1)
            if diagonal == "right":
                cells.append((ll, lr, ur))  # below the diagonal ll-ur
                cells.append((ll, ur, ul))  # above
            else:
                cells.append((ll, lr, ul))  # below the diagonal lr-ul
                cells.append((lr, ur, ul))  # above
    mesh = Mesh(vertices, np.asarray(cells, dtype=np.int64), TRIANGLE, tuple(box))
    return _validate(mesh)


def build_structured_quad_mesh(n: int, box=(0.0, 0.0, 1.0, 1.0)) -> Mesh:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    xmin, ymin, xmax, ymax = box
    if not (xmax > xmin and ymax > ymin):
        raise ValueError("degenerate bounding box")
    xs = np.linspace(xmin, xmax, n + 1)
    ys = np.linspace(ymin, ymax, n + 1)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return j * (n + 1) + i

    cells = []
    for j in range(n):
        for i in range(n):
            cells.append((vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)))
    mesh = Mesh(vertices, np.asarray(cells, dtype=np.int64), QUADRILATERAL, tuple(box))
    return _validate(mesh)


def load_mesh(text: str) -> Mesh:
    """Parse the plain-text mesh format.

    Line 1: ``vertices N``, then N lines ``x y``; then ``cells M tri|quad``,
    then M lines of 3 or 4 zero-based vertex indices.  ``#`` starts a comment.
    Clockwise cells are re-oriented.
    """
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    pos = 0

    def take():
        nonlocal pos
        if pos >= len(lines):
            raise MeshLoadError("unexpected end of mesh file")
        ln = lines[pos]
        pos += 1
        return ln

    head = take().split()
    if len(head) != 2 or head[0] != "vertices":
        raise MeshLoadError(f"expected 'vertices N', got {' '.join(head)!r}")
    try:
        nv = int(head[1])
    except ValueError as exc:
        raise MeshLoadError("vertex count is not an integer") from exc
    verts = np.zeros((nv, 2))
    for i in range(nv):
        parts = take().split()
        if len(parts) != 2:
            raise MeshLoadError(f"vertex line {i} must contain two coordinates")
        try:
            verts[i] = [float(parts[0]), float(parts[1])]
        except ValueError as exc:
            raise MeshLoadError(f"bad coordinate on vertex line {i}") from exc

    head = take().split()
    if len(head) != 3 or head[0] != "cells" or head[2] not in ("tri", "quad"):
        raise MeshLoadError("expected 'cells M tri|quad'")
    try:
        nc = int(head[1])
    except ValueError as exc:
        raise MeshLoadError("cell count is not an integer") from exc
    kind = TRIANGLE if head[2] == "tri" else QUADRILATERAL
    nvc = 3 if kind == TRIANGLE else 4
    cells = np.zeros((nc, nvc), dtype=np.int64)
    for i in range(nc):
        parts = take().split()
        if len(parts) != nvc:
            raise MeshLoadError(f"cell line {i} must contain {nvc} vertex indices")
        try:
            cells[i] = [int(p) for p in parts]
        except ValueError as exc:
            raise MeshLoadError(f"bad vertex index on cell line {i}") from exc

    if nc and (cells.min() < 0 or cells.max() >= nv):
        raise MeshLoadError("cell references a vertex index out of range")
    used = np.zeros(nv, dtype=bool)
    used[cells.ravel()] = True
    if not used.all():
        raise MeshLoadError(f"dangling vertex {int(np.argmin(used))} not used by any cell")

    box = (
        float(verts[:, 0].min()),
        float(verts[:, 1].min()),
        float(verts[:, 0].max()),
        float(verts[:, 1].max()),
    )
    mesh = Mesh(verts, cells, kind, box)
    areas = mesh.signed_areas()
    if np.any(areas < 0.0):
        cells = cells.copy()
        cells[areas < 0.0] = cells[areas < 0.0, ::-1]
        mesh = Mesh(verts, cells, kind, box)
    return _validate(mesh)


@dataclass(frozen=True)
class Facet:
    vertices: tuple  # (a, b): direction of K+'s CCW edge
    plus_cell: int
    minus_cell: Optional[int]
    normal: np.ndarray  # unit, outward from K+
    length: float
    plus_local: int  # local edge index within K+
    minus_local: Optional[int]
    minus_starts_at_a: bool  # minus cell's local edge runs a->b (rather than b->a)


@dataclass(frozen=True)
class FacetTopology:
    mesh: Mesh
    facets: list  # of Facet
    interior_facets: np.ndarray
    boundary_facets: np.ndarray
    cell_facets: np.ndarray  # (nc, edges per cell) facet index for each local edge
    cell_h: np.ndarray = field(repr=False, default=None)

    @property
    def num_facets(self) -> int:
        return len(self.facets)


def build_facet_topology(mesh: Mesh) -> FacetTopology:
    edges = _LOCAL_EDGES[mesh.cell_kind]
    ne = len(edges)
    incidence = {}
    for c in range(mesh.num_cells):
        cv = mesh.cells[c]
        for le, (i, j) in enumerate(edges):
            key = (min(cv[i], cv[j]), max(cv[i], cv[j]))
            incidence.setdefault(key, []).append((c, le))

    cell_h = mesh.cell_diameters()
    facets = []
    interior, boundary = [], []
    cell_facets = np.full((mesh.num_cells, ne), -1, dtype=np.int64)
    for key in sorted(incidence):
        adj = incidence[key]
        if len(adj) > 2:
            raise TopologyError(f"edge {key} shared by {len(adj)} cells")
        adj.sort()
        cp, lep = adj[0]
        i, j = edges[lep]
        a, b = int(mesh.cells[cp][i]), int(mesh.cells[cp][j])
        pa, pb = mesh.vertices[a], mesh.vertices[b]
        t = pb - pa
        length = float(np.linalg.norm(t))
        normal = np.array([t[1], -t[0]]) / length  # CCW edge -> outward normal
        idx = len(facets)
        if len(adj) == 2:
            cm, lem = adj[1]
            mi, mj = edges[lem]
            minus_starts_at_a = int(mesh.cells[cm][mi]) == a
            if minus_starts_at_a:
                # two CCW cells must traverse a shared edge in opposite
                # directions; same direction means the cells overlap
                raise TopologyError(f"cells {cp} and {cm} overlap across edge {key}")
            facets.append(
                Facet((a, b), cp, cm, normal, length, lep, lem, minus_starts_at_a)
            )
            interior.append(idx)
            cell_facets[cm, lem] = idx
        else:
            facets.append(Facet((a, b), cp, None, normal, length, lep, None, True))
            boundary.append(idx)
        cell_facets[cp, lep] = idx

    for f in facets:
        hmax = cell_h[f.plus_cell]
        if f.minus_cell is not None:
            hmax = max(hmax, cell_h[f.minus_cell])
        if f.length > hmax * (1 + 1e-12):
            raise TopologyError("facet longer than adjacent cell diameter")

    return FacetTopology(
        mesh,
        facets,
        np.asarray(interior, dtype=np.int64),
        np.asarray(boundary, dtype=np.int64),
        cell_facets,
        cell_h,
    )
