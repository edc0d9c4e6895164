"""Structured triangulations of the unit square with Alfeld refinement.

The velocity/pressure pair used downstream is only inf-sup stable and
exactly divergence-free on barycentrically refined (Alfeld-split)
triangulations, so meshes carry a parent map recording the split.  All
meshes are conforming (no hanging nodes) with counterclockwise
triangles; quality metrics follow the shape-regularity convention
gamma = max_K h_K / rho_K with rho_K the inscribed-circle diameter.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["TriMesh", "unit_square_mesh", "alfeld_split", "quality_report"]


@dataclass
class TriMesh:
    """Conforming triangulation: vertices, CCW triangles, boundary flags.

    edges and triangle_edges give each undirected edge a global index and
    map local edge slots (edge i is opposite local vertex i) to it; both
    are derived in __post_init__ and shared immutably by assembly code.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    parent: np.ndarray | None = None
    edges: np.ndarray = field(init=False)
    triangle_edges: np.ndarray = field(init=False)
    boundary_vertex: np.ndarray = field(init=False)
    boundary_edge: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.vertices = np.asarray(self.vertices, dtype=float)
        self.triangles = np.asarray(self.triangles, dtype=np.int64)
        if np.any(self.signed_areas() <= 0.0):
            raise ValueError("mesh has a degenerate or misoriented triangle")
        # Edge slot i is opposite local vertex i: (1,2), (2,0), (0,1).
        raw = self.triangles[:, [[1, 2], [2, 0], [0, 1]]].reshape(-1, 2)
        raw_sorted = np.sort(raw, axis=1)
        self.edges, inverse, counts = np.unique(
            raw_sorted, axis=0, return_inverse=True, return_counts=True
        )
        self.triangle_edges = inverse.reshape(-1, 3)
        if np.any(counts > 2):
            raise ValueError("non-manifold edge: more than two incident triangles")
        self.boundary_edge = counts == 1
        self.boundary_vertex = np.zeros(len(self.vertices), dtype=bool)
        self.boundary_vertex[self.edges[self.boundary_edge].ravel()] = True

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def corners(self) -> np.ndarray:
        """Vertex coordinates per triangle, shape (n_triangles, 3, 2)."""
        return self.vertices[self.triangles]

    def signed_areas(self) -> np.ndarray:
        c = self.vertices[self.triangles]
        d1 = c[:, 1] - c[:, 0]
        d2 = c[:, 2] - c[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def side_lengths(self) -> np.ndarray:
        """Edge lengths per triangle, slot i opposite local vertex i."""
        c = self.vertices[self.triangles]
        out = np.empty((self.n_triangles, 3))
        for i, (a, b) in enumerate(((1, 2), (2, 0), (0, 1))):
            out[:, i] = np.linalg.norm(c[:, a] - c[:, b], axis=1)
        return out

    @property
    def h_max(self) -> float:
        return float(self.side_lengths().max())

    def barycenters(self) -> np.ndarray:
        return self.corners().mean(axis=1)


def unit_square_mesh(m: int) -> TriMesh:
    """Structured mesh of (0,1)^2: m x m squares, each cut along the main
    diagonal into two right triangles; 2 m^2 triangles, h = sqrt(2)/m.

    All diagonals share one direction, so unit_square_mesh(2m) refines
    unit_square_mesh(m) exactly (vertex nesting used by the ladders).
    """
    if m < 1:
        raise ValueError(f"need at least one subdivision, got m={m}")
    side = np.linspace(0.0, 1.0, m + 1)
    X, Y = np.meshgrid(side, side, indexing="xy")
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i: int, j: int) -> int:
        return j * (m + 1) + i

    tris = []
    for j in range(m):
        for i in range(m):
            v00, v10 = vid(i, j), vid(i + 1, j)
            v01, v11 = vid(i, j + 1), vid(i + 1, j + 1)
            tris.append((v00, v10, v11))
            tris.append((v00, v11, v01))
    return TriMesh(vertices=vertices, triangles=np.array(tris))


def alfeld_split(mesh: TriMesh) -> TriMesh:
    """Barycentric refinement: each triangle splits into 3 at its
    barycenter; the parent map indexes the originating triangle."""
    bary = mesh.barycenters()
    n_old = mesh.n_vertices
    vertices = np.vstack([mesh.vertices, bary])
    t = mesh.triangles
    b = n_old + np.arange(mesh.n_triangles)
    children = np.empty((3 * mesh.n_triangles, 3), dtype=np.int64)
    children[0::3] = np.column_stack([t[:, 0], t[:, 1], b])
    children[1::3] = np.column_stack([t[:, 1], t[:, 2], b])
    children[2::3] = np.column_stack([t[:, 2], t[:, 0], b])
    parent = np.repeat(np.arange(mesh.n_triangles), 3)
    return TriMesh(vertices=vertices, triangles=children, parent=parent)


def quality_report(mesh: TriMesh) -> dict[str, float]:
    """Shape metrics: gamma = max h_K/rho_K, h ratio, mesh size.

    rho_K is the inscribed-circle diameter 4|K|/(a+b+c); degenerate
    elements are rejected by the TriMesh constructor already, but a
    near-zero area still surfaces here as an invalid-mesh error.
    """
    areas = mesh.signed_areas()
    if np.any(areas <= 1e-15):
        raise ValueError("degenerate triangle: nonpositive area")
    sides = mesh.side_lengths()
    h_K = sides.max(axis=1)
    rho_K = 4.0 * areas / sides.sum(axis=1)
    return {
        "gamma": float(np.max(h_K / rho_K)),
        "quasi_uniform_ratio": float(h_K.max() / h_K.min()),
        "h_max": float(h_K.max()),
    }
