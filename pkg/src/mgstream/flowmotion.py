"""Motion masks from adjacent frames: flow threshold AND closed temporal difference."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import ndimage

from .formats import atomic_write, flow_from_bytes, flow_to_bytes

FLOW_TAU = 1.0
DIFF_THRESHOLD = 10.0
MORPH_KERNEL = 20


def _check_same(a, b, what="images"):
    if np.shape(a)[:2] != np.shape(b)[:2]:
        raise ValueError(f"{what} must have matching dimensions, got {np.shape(a)} and {np.shape(b)}")


def _gray(img):
    img = np.asarray(img, dtype=np.float64)
    return img.mean(axis=2) if img.ndim == 3 else img


def _pyramid(img, levels):
    pyr = [img]
    for _ in range(levels - 1):
        blurred = ndimage.gaussian_filter(pyr[-1], 1.0, mode="nearest")
        pyr.append(blurred[::2, ::2])
    return pyr


def _sample(img, x, y):
    return ndimage.map_coordinates(img, [y, x], order=1, mode="nearest")


def estimate_flow(a, b, levels: int = 3, window: int = 9, iterations: int = 3,
                  min_eigen: float = 1e-6) -> np.ndarray:
    """Dense coarse-to-fine Lucas-Kanade flow; ``a(x) ~ b(x + flow(x))``.

    Returns an (H, W, 2) array of (dx, dy) in pixels. Windows whose structure
    tensor has a small minimum eigenvalue get no update, so flat regions keep
    zero flow.
    """
    _check_same(a, b)
    if levels < 1:
        raise ValueError("levels must be >= 1")
    pa = _pyramid(_gray(a), levels)
    pb = _pyramid(_gray(b), levels)
    flow = np.zeros(pa[-1].shape + (2,))
    for lvl in range(levels - 1, -1, -1):
        ia, ib = pa[lvl], pb[lvl]
        h, w = ia.shape
        if flow.shape[:2] != (h, w):
            up = np.stack([ndimage.zoom(flow[..., k], (h / flow.shape[0], w / flow.shape[1]), order=1)
                           for k in range(2)], axis=-1)
            flow = up[:h, :w] * 2.0
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        gy, gx = np.gradient(ia)
        sxx = ndimage.uniform_filter(gx * gx, window, mode="nearest")
        syy = ndimage.uniform_filter(gy * gy, window, mode="nearest")
        sxy = ndimage.uniform_filter(gx * gy, window, mode="nearest")
        tr = sxx + syy
        det = sxx * syy - sxy * sxy
        lam_min = 0.5 * (tr - np.sqrt(np.maximum(tr * tr - 4 * det, 0.0)))
        ok = lam_min > min_eigen
        det_safe = np.where(ok, det, 1.0)
        for _ in range(iterations):
            warped = _sample(ib, xs + flow[..., 0], ys + flow[..., 1])
            it = warped - ia
            sxt = ndimage.uniform_filter(gx * it, window, mode="nearest")
            syt = ndimage.uniform_filter(gy * it, window, mode="nearest")
            du = -(syy * sxt - sxy * syt) / det_safe
            dv = -(sxx * syt - sxy * sxt) / det_safe
            flow[..., 0] += np.where(ok, du, 0.0)
            flow[..., 1] += np.where(ok, dv, 0.0)
    return flow


def save_flow(flow, path) -> None:
    atomic_write(path, flow_to_bytes(flow))


def load_flow(path) -> np.ndarray:
    return flow_from_bytes(Path(path).read_bytes())


def flow_mask(flow, tau: float = FLOW_TAU) -> np.ndarray:
    if tau <= 0:
        raise ValueError("tau must be positive")
    flow = np.asarray(flow, dtype=np.float64)
    return np.hypot(flow[..., 0], flow[..., 1]) > tau


def dilate(mask, kernel: int) -> np.ndarray:
    """Square max filter; offsets -(k//2) .. k-1-k//2, replicated borders."""
    return ndimage.maximum_filter(np.asarray(mask, dtype=bool), size=kernel, mode="nearest")


def erode(mask, kernel: int) -> np.ndarray:
    """Square min filter over the reflected offsets of :func:`dilate`."""
    origin = -1 if kernel % 2 == 0 else 0
    return ndimage.minimum_filter(np.asarray(mask, dtype=bool), size=kernel, mode="nearest",
                                  origin=origin)


def close_mask(mask, kernel: int = MORPH_KERNEL) -> np.ndarray:
    return erode(dilate(mask, kernel), kernel)


def temporal_diff_mask(i_t, i_prev, thresh: float = DIFF_THRESHOLD,
                       kernel: int = MORPH_KERNEL) -> np.ndarray:
    """Closed mask of pixels whose max-channel change exceeds ``thresh`` on 0..255."""
    _check_same(i_t, i_prev)
    diff = np.abs(np.asarray(i_t, dtype=np.float64) - np.asarray(i_prev, dtype=np.float64)) * 255.0
    if diff.ndim == 3:
        diff = diff.max(axis=2)
    return close_mask(diff > thresh, kernel)


def motion_mask(flow_m, diff_m) -> np.ndarray:
    _check_same(flow_m, diff_m, "masks")
    return np.logical_and(flow_m, diff_m)


def frame_motion_mask(i_t, i_prev, flow, tau=FLOW_TAU, thresh=DIFF_THRESHOLD,
                      kernel=MORPH_KERNEL) -> np.ndarray:
    """Full motion mask for one view given a flow field from ``i_prev`` to ``i_t``."""
    _check_same(i_t, flow, "image and flow")
    return motion_mask(flow_mask(flow, tau), temporal_diff_mask(i_t, i_prev, thresh, kernel))
