"""Motion-related Gaussian selection: back-projection, clustering, hull infill."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .hull import ConvexHull3, convex_hull

NOISE = -1
DBSCAN_EPS = 2.0
DBSCAN_MIN_SAMPLES = 10


def index_set(values=()) -> np.ndarray:
    """Sorted, deduplicated int64 index array."""
    return np.unique(np.asarray(values, dtype=np.int64).reshape(-1))


def backproject(gims, masks) -> np.ndarray:
    """Union of GIM ids over mask-true pixels of every view."""
    if len(gims) != len(masks):
        raise ValueError("need one mask per GIM")
    hits = []
    for gim, mask in zip(gims, masks):
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (gim.height, gim.width):
            raise ValueError(f"mask shape {mask.shape} does not match GIM {(gim.height, gim.width)}")
        ids = gim.indices[mask].reshape(-1)
        hits.append(ids[ids >= 0])
    if not hits:
        return index_set()
    return index_set(np.concatenate(hits))


def _neighbors(points, eps):
    """Neighbor lists (self included, distance <= eps) via a uniform grid."""
    cells = np.floor(points / eps).astype(np.int64)
    buckets = defaultdict(list)
    for i, key in enumerate(map(tuple, cells)):
        buckets[key].append(i)
    buckets = {k: np.asarray(v, dtype=np.int64) for k, v in buckets.items()}
    offsets = [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)]
    out = [None] * len(points)
    eps2 = eps * eps
    for key, members in buckets.items():
        cand = [buckets[(key[0] + o[0], key[1] + o[1], key[2] + o[2])]
                for o in offsets if (key[0] + o[0], key[1] + o[1], key[2] + o[2]) in buckets]
        cand = np.sort(np.concatenate(cand))
        d2 = ((points[members][:, None, :] - points[cand][None, :, :]) ** 2).sum(axis=2)
        for row, i in enumerate(members):
            out[i] = cand[d2[row] <= eps2]
    return out


def dbscan(points, eps: float = DBSCAN_EPS, min_samples: int = DBSCAN_MIN_SAMPLES) -> np.ndarray:
    """Density clustering; returns per-point labels (``NOISE`` = -1).

    Cluster ids are assigned in lexicographic order of each cluster's smallest
    core point, so the partition and its labels do not depend on input order.
    Border points join the lowest-id cluster among their core neighbors.
    """
    if eps <= 0 or min_samples < 1:
        raise ValueError("eps must be > 0 and min_samples >= 1")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    labels = np.full(n, NOISE, dtype=np.int64)
    if n == 0:
        return labels
    nbrs = _neighbors(pts, eps)
    core = np.array([len(nb) >= min_samples for nb in nbrs])
    comp = np.full(n, -1, dtype=np.int64)
    n_comp = 0
    for seed in np.flatnonzero(core):
        if comp[seed] >= 0:
            continue
        comp[seed] = n_comp
        stack = [seed]
        while stack:
            i = stack.pop()
            for j in nbrs[i]:
                if core[j] and comp[j] < 0:
                    comp[j] = n_comp
                    stack.append(j)
        n_comp += 1
    if n_comp == 0:
        return labels
    # canonical ids: sort components by their lexicographically smallest core point
    core_idx = np.flatnonzero(core)
    order = np.lexsort(pts[core_idx].T[::-1])
    first = {}
    for i in core_idx[order]:
        first.setdefault(int(comp[i]), len(first))
    remap = np.array([first[c] for c in range(n_comp)], dtype=np.int64)
    labels[core] = remap[comp[core]]
    for i in np.flatnonzero(~core):
        ids = [labels[j] for j in nbrs[i] if core[j]]
        if ids:
            labels[i] = min(ids)
    return labels


def cluster_hulls(points, labels) -> list[ConvexHull3]:
    """One hull per cluster id 0..k-1 (degenerate hulls for flat or tiny clusters)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    k = int(labels.max()) + 1 if len(labels) else 0
    return [convex_hull(pts[labels == c]) for c in range(k)]


def points_in_hulls(positions, hulls) -> np.ndarray:
    """Indices of ``positions`` inside at least one non-degenerate hull."""
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    inside = np.zeros(len(pos), dtype=bool)
    for hull in hulls:
        if hull.degenerate:
            continue
        lo = hull.vertices.min(axis=0) - 1e-9
        hi = hull.vertices.max(axis=0) + 1e-9
        cand = np.flatnonzero(np.all((pos >= lo) & (pos <= hi), axis=1) & ~inside)
        if len(cand):
            inside[cand[hull.contains(pos[cand])]] = True
    return np.flatnonzero(inside).astype(np.int64)


def motion_related(g_o, g_i) -> np.ndarray:
    return np.union1d(index_set(g_o), index_set(g_i)).astype(np.int64)


@dataclass
class Selection:
    g_o: np.ndarray
    g_i: np.ndarray
    g_m: np.ndarray
    labels: np.ndarray          # cluster label per member of g_o
    hulls: list


def select_motion_related(positions, gims, masks, eps: float = DBSCAN_EPS,
                          min_samples: int = DBSCAN_MIN_SAMPLES,
                          use_clustering: bool = True) -> Selection:
    """Back-project masks, cluster the hits, infill each cluster hull, take the union.

    With ``use_clustering=False`` a single hull is built over all hits.
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    g_o = backproject(gims, masks)
    hit_pos = positions[g_o]
    if use_clustering:
        labels = dbscan(hit_pos, eps, min_samples)
        hulls = cluster_hulls(hit_pos, labels)
    else:
        labels = np.zeros(len(g_o), dtype=np.int64)
        hulls = [convex_hull(hit_pos)] if len(g_o) else []
    g_i = points_in_hulls(positions, hulls)
    return Selection(g_o, g_i, motion_related(g_o, g_i), labels, hulls)
