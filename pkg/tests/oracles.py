"""Independent reference implementations used as test oracles.

Everything here is written from the definitions, deliberately slow and
without sharing code paths with the package (only plain containers are
imported).
"""
from __future__ import annotations

import itertools
import math

import numpy as np

SH0 = 0.5 / math.sqrt(math.pi)
SH1 = math.sqrt(3.0) / (2.0 * math.sqrt(math.pi))


# --------------------------------------------------------------------------
# brute-force compositor


def rotation_from_quat(q):
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z],
    ])


def splat(gs, i, cam):
    """Screen-space mean, inverse 2D covariance, depth and raw color of Gaussian i."""
    p = gs.positions[i]
    t = cam.rotation @ p + cam.translation
    if t[2] <= 0.01:
        return None
    mean = np.array([cam.fx * t[0] / t[2] + cam.cx, cam.fy * t[1] / t[2] + cam.cy])
    jac = np.array([[cam.fx / t[2], 0.0, -cam.fx * t[0] / t[2] ** 2],
                    [0.0, cam.fy / t[2], -cam.fy * t[1] / t[2] ** 2]])
    r = rotation_from_quat(gs.quats[i])
    cov3 = r @ np.diag(gs.scales[i] ** 2) @ r.T
    cov2 = jac @ cam.rotation @ cov3 @ cam.rotation.T @ jac.T + 0.3 * np.eye(2)
    eye = -cam.rotation.T @ cam.translation
    d = (p - eye) / np.linalg.norm(p - eye)
    basis = np.array([SH0, -SH1 * d[1], SH1 * d[2], -SH1 * d[0]])
    color = gs.sh[i].reshape(3, 4) @ basis
    return mean, np.linalg.inv(cov2), t[2], color


def brute_weights(gs, cam):
    """Per-Gaussian blending weights (N, H, W), Gaussians listed in (depth, index) order."""
    h, w = cam.height, cam.width
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    splats = [(i, splat(gs, i, cam)) for i in range(len(gs))]
    splats = [(i, s) for i, s in splats if s is not None]
    splats.sort(key=lambda item: (item[1][2], item[0]))
    trans = np.ones((h, w))
    order, weights, colors = [], [], []
    for i, (mean, conic, _, color) in splats:
        dx, dy = xs - mean[0], ys - mean[1]
        power = conic[0, 0] * dx * dx + 2 * conic[0, 1] * dx * dy + conic[1, 1] * dy * dy
        raw = gs.opacities[i] * np.exp(-0.5 * power)
        alpha = np.where(raw < 1.0 / 255.0, 0.0, np.minimum(raw, 0.99))
        weights.append(alpha * trans)
        trans = trans * (1.0 - alpha)
        order.append(i)
        colors.append(np.clip(color, 0.0, 1.0))
    return np.asarray(order, dtype=np.int64), np.asarray(weights).reshape(-1, h, w), colors, trans


def brute_render(gs, cam):
    order, weights, colors, _ = brute_weights(gs, cam)
    img = np.zeros((cam.height, cam.width, 3))
    for wt, c in zip(weights, colors):
        img += wt[..., None] * c
    return img


def brute_gim_top1(gs, cam):
    order, weights, _, _ = brute_weights(gs, cam)
    if len(order) == 0:
        return np.full((cam.height, cam.width), -1, dtype=np.int64)
    best = np.argmax(weights, axis=0)
    top = order[best]
    return np.where(weights.max(axis=0) > 0, top, -1)


# --------------------------------------------------------------------------
# clustering and hulls


def naive_dbscan(points, eps, min_samples):
    """O(n^2) density clustering with the package's canonical labelling rules."""
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
    adj = d2 <= eps * eps
    core = adj.sum(axis=1) >= min_samples
    comp = -np.ones(n, dtype=np.int64)
    k = 0
    for s in range(n):
        if not core[s] or comp[s] >= 0:
            continue
        frontier = [s]
        comp[s] = k
        while frontier:
            i = frontier.pop()
            for j in np.flatnonzero(adj[i] & core):
                if comp[j] < 0:
                    comp[j] = k
                    frontier.append(j)
        k += 1
    # relabel components by their lexicographically smallest core point
    keys = []
    for c in range(k):
        members = [tuple(pts[i]) for i in range(n) if comp[i] == c]
        keys.append(min(members))
    rank = {c: r for r, c in enumerate(sorted(range(k), key=lambda c: keys[c]))}
    for i in range(n):
        if core[i]:
            labels[i] = rank[comp[i]]
    for i in range(n):
        if not core[i]:
            ids = [labels[j] for j in np.flatnonzero(adj[i] & core)]
            if ids:
                labels[i] = min(ids)
    return labels


def brute_hull_planes(points, tol=1e-12):
    """All supporting planes through point triples: (normals, offsets) with n.x <= d inside."""
    pts = np.asarray(points, dtype=np.float64)
    tri = np.array(list(itertools.combinations(range(len(pts)), 3)))
    a, b, c = pts[tri[:, 0]], pts[tri[:, 1]], pts[tri[:, 2]]
    nrm = np.cross(b - a, c - a)
    length = np.linalg.norm(nrm, axis=1)
    keep = length > 1e-12
    nrm = nrm[keep] / length[keep, None]
    off = np.einsum("ij,ij->i", nrm, a[keep])
    side = pts @ nrm.T - off[None, :]                  # (n, planes)
    scale = np.ptp(pts, axis=0).max()
    below = np.all(side <= tol * scale, axis=0)
    above = np.all(side >= -tol * scale, axis=0)
    normals = np.concatenate([nrm[below], -nrm[above]])
    offsets = np.concatenate([off[below], -off[above]])
    return normals, offsets


def brute_signed_distance(normals, offsets, query):
    """Max over supporting planes of n.q - d: <= 0 inside, > 0 outside."""
    return (np.atleast_2d(query) @ normals.T - offsets[None, :]).max(axis=1)


# --------------------------------------------------------------------------
# morphology, SSIM, flow warps


def _offsets(kernel):
    lo = -(kernel // 2)
    return range(lo, lo + kernel)


def naive_dilate(mask, kernel):
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    out = np.zeros_like(mask)
    for y in range(h):
        for x in range(w):
            for dy in _offsets(kernel):
                for dx in _offsets(kernel):
                    if mask[min(max(y + dy, 0), h - 1), min(max(x + dx, 0), w - 1)]:
                        out[y, x] = True
                        break
                if out[y, x]:
                    break
    return out


def naive_erode(mask, kernel):
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    out = np.ones_like(mask)
    for y in range(h):
        for x in range(w):
            ok = True
            for dy in _offsets(kernel):
                for dx in _offsets(kernel):
                    if not mask[min(max(y - dy, 0), h - 1), min(max(x - dx, 0), w - 1)]:
                        ok = False
                        break
                if not ok:
                    break
            out[y, x] = ok
    return out


def reference_ssim(a, b, size=11, sigma=1.5):
    """Mean SSIM with a full 2D Gaussian window and zero padding, summed offset by offset."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    r = size // 2
    g = np.array([math.exp(-(k * k) / (2 * sigma * sigma)) for k in range(-r, r + 1)])
    k2 = np.outer(g, g)
    k2 /= k2.sum()
    h, w = a.shape[:2]

    def blur(img):
        pad = np.zeros((h + 2 * r, w + 2 * r) + img.shape[2:])
        pad[r:r + h, r:r + w] = img
        out = np.zeros_like(img)
        for dy in range(size):
            for dx in range(size):
                out += k2[dy, dx] * pad[dy:dy + h, dx:dx + w]
        return out

    c1, c2 = 0.01 ** 2, 0.03 ** 2
    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a ** 2
    var_b = blur(b * b) - mu_b ** 2
    cov = blur(a * b) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(s.mean())


# --------------------------------------------------------------------------
# finite differences


def central_difference(f, x, h):
    """Central differences of scalar ``f`` at every entry of array ``x`` (modified in place, restored)."""
    g = np.zeros(x.shape)
    flat = x.reshape(-1)
    for k in range(flat.size):
        keep = flat[k]
        flat[k] = keep + h
        up = f()
        flat[k] = keep - h
        down = f()
        flat[k] = keep
        g.reshape(-1)[k] = (up - down) / (2 * h)
    return g


def relative_errors(analytic, numeric, floor=1e-6):
    """Per-probe relative errors where either gradient exceeds ``floor``."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    keep = (np.abs(a) > floor) | (np.abs(n) > floor)
    return np.abs(a[keep] - n[keep]) / np.maximum(np.abs(a[keep]), np.abs(n[keep]))
