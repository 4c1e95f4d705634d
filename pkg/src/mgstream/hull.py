"""Incremental 3D convex hull with half-space membership tests."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MEMBERSHIP_TOL = 1e-9


@dataclass
class ConvexHull3:
    points: np.ndarray    # (n, 3) construction points
    facets: np.ndarray    # (F, 3) indices into points, counter-clockwise seen from outside
    normals: np.ndarray   # (F, 3) unit outward normals
    offsets: np.ndarray   # (F,) plane offsets, n . x <= offset inside

    @property
    def degenerate(self) -> bool:
        return len(self.facets) == 0

    @property
    def vertex_indices(self) -> np.ndarray:
        return np.unique(self.facets)

    @property
    def vertices(self) -> np.ndarray:
        return self.points[self.vertex_indices]

    def contains(self, query, tol: float = MEMBERSHIP_TOL) -> np.ndarray:
        """Boundary-inclusive membership for an (m, 3) array of points."""
        query = np.atleast_2d(np.asarray(query, dtype=np.float64))
        if self.degenerate:
            return np.zeros(len(query), dtype=bool)
        out = np.ones(len(query), dtype=bool)
        # chunk over facets to bound memory
        for start in range(0, len(self.normals), 256):
            n = self.normals[start:start + 256]
            d = self.offsets[start:start + 256]
            out &= np.all(query @ n.T <= d + tol, axis=1)
        return out


def _orient(a, b, c, p):
    return np.dot(np.cross(b - a, c - a), p - a)


def _initial_simplex(pts, tol):
    i0 = int(np.lexsort(pts.T[::-1])[0])
    d = np.linalg.norm(pts - pts[i0], axis=1)
    i1 = int(np.argmax(d))
    if d[i1] <= tol:
        return None
    axis = (pts[i1] - pts[i0]) / d[i1]
    rel = pts - pts[i0]
    perp = rel - np.outer(rel @ axis, axis)
    dl = np.linalg.norm(perp, axis=1)
    i2 = int(np.argmax(dl))
    if dl[i2] <= tol:
        return None
    normal = np.cross(pts[i1] - pts[i0], pts[i2] - pts[i0])
    normal /= np.linalg.norm(normal)
    dp = np.abs(rel @ normal)
    i3 = int(np.argmax(dp))
    if dp[i3] <= tol:
        return None
    return i0, i1, i2, i3


def convex_hull(points) -> ConvexHull3:
    """Hull of ``points``; fewer than 4 or rank-deficient inputs give a degenerate hull."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    empty = ConvexHull3(pts, np.zeros((0, 3), dtype=np.int64), np.zeros((0, 3)), np.zeros(0))
    if len(pts) < 4:
        return empty
    extent = float(np.ptp(pts, axis=0).max())
    if extent == 0.0:
        return empty
    simplex = _initial_simplex(pts, 1e-12 * extent)
    if simplex is None:
        return empty
    i0, i1, i2, i3 = simplex
    if _orient(pts[i0], pts[i1], pts[i2], pts[i3]) > 0:
        i1, i2 = i2, i1
    # every facet keeps the tetrahedron's interior on its negative side
    facets = [(i0, i1, i2), (i0, i3, i1), (i1, i3, i2), (i2, i3, i0)]
    vis_tol = 1e-12 * extent ** 3
    done = {i0, i1, i2, i3}
    for k in range(len(pts)):
        if k in done:
            continue
        p = pts[k]
        f = np.asarray(facets)
        a, b, c = pts[f[:, 0]], pts[f[:, 1]], pts[f[:, 2]]
        orient = np.einsum("ij,ij->i", np.cross(b - a, c - a), p - a)
        visible = orient > vis_tol
        if not visible.any():
            continue
        edges = set()
        for tri in f[visible]:
            for e in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                edges.add((int(e[0]), int(e[1])))
        horizon = [e for e in edges if (e[1], e[0]) not in edges]
        facets = [tuple(t) for t in f[~visible].tolist()] + [(e[0], e[1], k) for e in horizon]
    f = np.asarray(facets, dtype=np.int64)
    a, b, c = pts[f[:, 0]], pts[f[:, 1]], pts[f[:, 2]]
    normals = np.cross(b - a, c - a)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    offsets = np.einsum("ij,ij->i", normals, a)
    # make planes tight: the hull's own vertices must satisfy every constraint
    verts = pts[np.unique(f)]
    offsets = np.maximum(offsets, (verts @ normals.T).max(axis=0))
    return ConvexHull3(pts, f, normals, offsets)
