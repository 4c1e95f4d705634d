"""Deterministic CPU tile rasterizer: color render, Gaussian-ID maps, backward pass.

Every 16x16 tile gathers the splats whose contributing ellipse overlaps it,
sorts them front to back by camera depth (index breaks ties) and composites
them with numpy over the tile's pixels. Pixel centers sit on integer
coordinates. Tiles write disjoint image regions and the backward pass sums
per-tile partial gradients in tile order, so results do not depend on how
tiles are scheduled across threads.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .gsplat import (SH_C1, Camera, GaussianSet, _unit_rotmat, normalize_jacobian,
                     project_gaussians, rotmat_jacobian, sh_basis)

TILE = 16
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0


@dataclass
class RenderedImage:
    rgb: np.ndarray       # (H, W, 3)
    t_final: np.ndarray   # (H, W)

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]


@dataclass
class GimBuffer:
    """Top-N Gaussian ids per pixel by blending weight; -1 / 0.0 pad empty slots."""

    indices: np.ndarray   # (H, W, N) int64
    weights: np.ndarray   # (H, W, N) float64

    @property
    def height(self) -> int:
        return self.indices.shape[0]

    @property
    def width(self) -> int:
        return self.indices.shape[1]

    @property
    def top_n(self) -> int:
        return self.indices.shape[2]

    def pixel(self, y: int, x: int):
        k = self.indices[y, x]
        keep = k >= 0
        return k[keep].tolist(), self.weights[y, x][keep].tolist()


@dataclass
class GaussianGradients:
    du: np.ndarray        # (N, 3)
    dq: np.ndarray        # (N, 4)
    dopacity: np.ndarray  # (N,)
    dsh: np.ndarray       # (N, 12)
    dscale: np.ndarray = None   # (N, 3)

    @classmethod
    def zeros(cls, n: int) -> "GaussianGradients":
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros(n), np.zeros((n, 12)), np.zeros((n, 3)))


def _thread_count() -> int:
    try:
        return max(1, int(os.environ.get("MGS_THREADS", "1")))
    except ValueError:
        return 1


def _map_tiles(fn, tiles):
    n = _thread_count()
    if n == 1 or len(tiles) < 2:
        return [fn(t) for t in tiles]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, tiles))


class _Frame:
    """Projection plus tile binning for one (set, camera) pair."""

    def __init__(self, gs: GaussianSet, cam: Camera):
        self.cam = cam
        self.n = len(gs)
        self.proj = project_gaussians(gs, cam) if self.n else None
        self.opacity = gs.opacities
        h, w = cam.height, cam.width
        self.tiles = [(y0, x0) for y0 in range(0, h, TILE) for x0 in range(0, w, TILE)]
        if self.n == 0:
            self.active = np.zeros(0, dtype=bool)
            return
        p = self.proj
        o = gs.opacities
        # alpha >= 1/255 only where d^T conic d <= 2 ln(255 o): exact axis-aligned ellipse box
        level = np.where(o > ALPHA_MIN, 2.0 * np.log(np.maximum(o, ALPHA_MIN) * 255.0), -1.0)
        self.active = p.visible & (level > 0)
        lv = np.maximum(level, 0.0)
        self.rx = np.sqrt(lv * p.cov2d[:, 0, 0])
        self.ry = np.sqrt(lv * p.cov2d[:, 1, 1])
        self.xmin = p.mean2d[:, 0] - self.rx
        self.xmax = p.mean2d[:, 0] + self.rx
        self.ymin = p.mean2d[:, 1] - self.ry
        self.ymax = p.mean2d[:, 1] + self.ry
        self.order = np.lexsort((np.arange(self.n), p.depth))

    def tile_shape(self, tile):
        y0, x0 = tile
        return min(TILE, self.cam.height - y0), min(TILE, self.cam.width - x0)

    def tile_splats(self, tile):
        """Sorted splat ids overlapping ``tile`` and their per-pixel alphas."""
        y0, x0 = tile
        th, tw = self.tile_shape(tile)
        if self.n == 0:
            return np.zeros(0, dtype=np.int64), None
        o = self.order
        hit = (self.active[o] & (self.xmax[o] >= x0) & (self.xmin[o] <= x0 + tw - 1)
               & (self.ymax[o] >= y0) & (self.ymin[o] <= y0 + th - 1))
        ids = o[hit]
        if len(ids) == 0:
            return ids, None
        p = self.proj
        ys, xs = np.mgrid[y0:y0 + th, x0:x0 + tw]
        px = xs.reshape(-1).astype(np.float64)
        py = ys.reshape(-1).astype(np.float64)
        dx = px[None, :] - p.mean2d[ids, 0:1]
        dy = py[None, :] - p.mean2d[ids, 1:2]
        a = p.conic[ids, 0, 0][:, None]
        b = p.conic[ids, 0, 1][:, None]
        c = p.conic[ids, 1, 1][:, None]
        power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy)
        gauss = np.exp(power)
        raw = self.opacity[ids][:, None] * gauss
        alpha = np.minimum(raw, ALPHA_MAX)
        alpha = np.where(raw >= ALPHA_MIN, alpha, 0.0)
        return ids, (alpha, raw, gauss, dx, dy)


def _exclusive_transmittance(alpha):
    one_minus = 1.0 - alpha
    trans = np.cumprod(one_minus, axis=0)
    t_excl = np.empty_like(alpha)
    t_excl[0] = 1.0
    t_excl[1:] = trans[:-1]
    return t_excl, trans[-1]


def _clamped_colors(frame: _Frame, ids):
    return np.clip(frame.proj.color[ids], 0.0, 1.0)


def render(gs: GaussianSet, cam: Camera, background=(0.0, 0.0, 0.0)) -> RenderedImage:
    """Front-to-back alpha composite of ``gs`` seen from ``cam``."""
    frame = _Frame(gs, cam)
    h, w = cam.height, cam.width
    rgb = np.zeros((h, w, 3))
    t_final = np.ones((h, w))
    bg = np.asarray(background, dtype=np.float64)

    def work(tile):
        ids, data = frame.tile_splats(tile)
        th, tw = frame.tile_shape(tile)
        if data is None:
            return tile, np.broadcast_to(bg, (th, tw, 3)), np.ones((th, tw))
        alpha = data[0]
        t_excl, t_last = _exclusive_transmittance(alpha)
        weights = alpha * t_excl
        color = weights.T @ _clamped_colors(frame, ids) + t_last[:, None] * bg
        return tile, color.reshape(th, tw, 3), t_last.reshape(th, tw)

    for (y0, x0), color, tl in _map_tiles(work, frame.tiles):
        th, tw = tl.shape
        rgb[y0:y0 + th, x0:x0 + tw] = color
        t_final[y0:y0 + th, x0:x0 + tw] = tl
    return RenderedImage(rgb, t_final)


def render_gim(gs: GaussianSet, cam: Camera, top_n: int = 1) -> GimBuffer:
    """Per-pixel ids of the ``top_n`` splats with the largest blending weight."""
    if not 1 <= top_n <= 5:
        raise ValueError("top_n must be in [1, 5]")
    frame = _Frame(gs, cam)
    h, w = cam.height, cam.width
    indices = np.full((h, w, top_n), -1, dtype=np.int64)
    weights = np.zeros((h, w, top_n))

    def work(tile):
        ids, data = frame.tile_splats(tile)
        th, tw = frame.tile_shape(tile)
        out_i = np.full((th * tw, top_n), -1, dtype=np.int64)
        out_w = np.zeros((th * tw, top_n))
        if data is not None:
            alpha = data[0]
            t_excl, _ = _exclusive_transmittance(alpha)
            wts = alpha * t_excl
            k = min(top_n, len(ids))
            # rows are already in (depth, index) order, so a stable sort keeps the tie-break
            rank = np.argsort(-wts, axis=0, kind="stable")[:k]
            top_w = np.take_along_axis(wts, rank, axis=0)
            top_i = ids[rank]
            top_i = np.where(top_w > 0, top_i, -1)
            out_i[:, :k] = top_i.T
            out_w[:, :k] = top_w.T
        return tile, out_i.reshape(th, tw, top_n), out_w.reshape(th, tw, top_n)

    for (y0, x0), oi, ow in _map_tiles(work, frame.tiles):
        th, tw = oi.shape[:2]
        indices[y0:y0 + th, x0:x0 + tw] = oi
        weights[y0:y0 + th, x0:x0 + tw] = ow
    return GimBuffer(indices, weights)


def coverage_mask(gs: GaussianSet, cam: Camera, subset) -> np.ndarray:
    """Pixels where any Gaussian of ``subset`` contributes a non-skipped alpha."""
    frame = _Frame(gs, cam)
    member = np.zeros(len(gs), dtype=bool)
    member[np.asarray(subset, dtype=np.int64)] = True
    out = np.zeros((cam.height, cam.width), dtype=bool)
    for tile in frame.tiles:
        ids, data = frame.tile_splats(tile)
        if data is None:
            continue
        th, tw = frame.tile_shape(tile)
        hit = ((data[0] > 0) & member[ids][:, None]).any(axis=0)
        y0, x0 = tile
        out[y0:y0 + th, x0:x0 + tw] = hit.reshape(th, tw)
    return out


def backward(gs: GaussianSet, cam: Camera, dl_dimage, background=(0.0, 0.0, 0.0)) -> GaussianGradients:
    """Analytic gradient of ``sum(dl_dimage * render(gs, cam).rgb)`` per Gaussian."""
    g_img = np.asarray(dl_dimage, dtype=np.float64)
    if g_img.shape != (cam.height, cam.width, 3):
        raise ValueError(f"dl_dimage shape {g_img.shape} does not match camera "
                         f"({cam.height}, {cam.width}, 3)")
    n = len(gs)
    grads = GaussianGradients.zeros(n)
    if n == 0:
        return grads
    frame = _Frame(gs, cam)
    p = frame.proj
    bg = np.asarray(background, dtype=np.float64)

    def work(tile):
        ids, data = frame.tile_splats(tile)
        if data is None:
            return None
        alpha, raw, gauss, dx, dy = data
        y0, x0 = tile
        th, tw = frame.tile_shape(tile)
        g = g_img[y0:y0 + th, x0:x0 + tw].reshape(-1, 3)       # (P, 3)
        col = _clamped_colors(frame, ids)                         # (K, 3)
        t_excl, t_last = _exclusive_transmittance(alpha)
        wts = alpha * t_excl                                       # (K, P)
        g_col = wts @ g                                            # (K, 3)
        contrib = (col @ g.T) * wts                                # (K, P): g . c_i w_i
        tail = np.cumsum(contrib[::-1], axis=0)[::-1]              # inclusive suffix sums
        after = tail - contrib + (t_last * (g @ bg))[None, :]
        g_alpha = (col @ g.T) * t_excl - after / (1.0 - alpha)
        live = (raw >= ALPHA_MIN) & (raw < ALPHA_MAX)
        g_raw = np.where(live, g_alpha, 0.0)
        g_op = (g_raw * gauss).sum(axis=1)
        g_pow = g_raw * raw
        a = p.conic[ids, 0, 0][:, None]
        b = p.conic[ids, 0, 1][:, None]
        c = p.conic[ids, 1, 1][:, None]
        g_mx = (g_pow * (a * dx + b * dy)).sum(axis=1)
        g_my = (g_pow * (b * dx + c * dy)).sum(axis=1)
        g_a = (g_pow * (-0.5 * dx * dx)).sum(axis=1)
        g_b = (g_pow * (-0.5 * dx * dy)).sum(axis=1)
        g_c = (g_pow * (-0.5 * dy * dy)).sum(axis=1)
        return ids, g_col, g_op, g_mx, g_my, g_a, g_b, g_c

    g_color = np.zeros((n, 3))
    g_op = np.zeros(n)
    g_mean = np.zeros((n, 2))
    g_conic = np.zeros((n, 2, 2))
    for res in _map_tiles(work, frame.tiles):
        if res is None:
            continue
        ids, gc, go, gmx, gmy, ga, gb, gcc = res
        g_color[ids] += gc
        g_op[ids] += go
        g_mean[ids, 0] += gmx
        g_mean[ids, 1] += gmy
        g_conic[ids, 0, 0] += ga
        g_conic[ids, 0, 1] += gb
        g_conic[ids, 1, 0] += gb
        g_conic[ids, 1, 1] += gcc

    grads.dopacity = g_op
    # color: clamp to [0, 1] then SH basis (direction depends on position)
    raw_c = p.color
    g_c = np.where((raw_c > 0.0) & (raw_c < 1.0), g_color, 0.0)
    basis = sh_basis(p.view_dir)
    grads.dsh = (g_c[:, :, None] * basis[:, None, :]).reshape(n, 12)
    sh = gs.sh.reshape(n, 3, 4)
    g_dir = SH_C1 * np.stack([
        -(g_c * sh[:, :, 3]).sum(axis=1),
        -(g_c * sh[:, :, 1]).sum(axis=1),
        (g_c * sh[:, :, 2]).sum(axis=1),
    ], axis=1)
    d = p.view_dir
    g_u = (g_dir - d * (d * g_dir).sum(axis=1, keepdims=True)) / p.view_dist[:, None]

    # conic -> cov2d -> (J, cov3d)
    conic = p.conic
    g_cov2d = -conic @ g_conic @ conic
    w = cam.rotation
    tm = p.jac @ w
    g_tm = (g_cov2d + np.swapaxes(g_cov2d, 1, 2)) @ tm @ p.cov3d
    g_cov3d = np.swapaxes(tm, 1, 2) @ g_cov2d @ tm
    g_jac = g_tm @ w.T
    t = p.t_cam
    tz = np.where(p.visible, t[:, 2], 1.0)
    tx, ty = t[:, 0], t[:, 1]
    fx, fy = cam.fx, cam.fy
    g_t = np.zeros((n, 3))
    g_t[:, 0] = g_jac[:, 0, 2] * (-fx / tz ** 2) + g_mean[:, 0] * fx / tz
    g_t[:, 1] = g_jac[:, 1, 2] * (-fy / tz ** 2) + g_mean[:, 1] * fy / tz
    g_t[:, 2] = (g_jac[:, 0, 0] * (-fx / tz ** 2) + g_jac[:, 0, 2] * (2 * fx * tx / tz ** 3)
                 + g_jac[:, 1, 1] * (-fy / tz ** 2) + g_jac[:, 1, 2] * (2 * fy * ty / tz ** 3)
                 - g_mean[:, 0] * fx * tx / tz ** 2 - g_mean[:, 1] * fy * ty / tz ** 2)
    g_u = g_u + g_t @ w

    # cov3d = M M^T, M = R diag(s)
    qn = gs.quats / np.linalg.norm(gs.quats, axis=1, keepdims=True)
    rot = _unit_rotmat(qn)
    m = rot * gs.scales[:, None, :]
    g_m = 2.0 * g_cov3d @ m
    g_rot = g_m * gs.scales[:, None, :]
    g_qn = np.einsum("nij,nijk->nk", g_rot, rotmat_jacobian(qn))
    g_q = np.einsum("nk,nkj->nj", g_qn, normalize_jacobian(gs.quats))
    g_s = (g_m * rot).sum(axis=1)

    culled = ~frame.active
    g_u[culled] = 0.0
    g_q[culled] = 0.0
    g_s[culled] = 0.0
    grads.du = g_u
    grads.dq = g_q
    grads.dscale = g_s
    return grads
