"""Image-quality and temporal-consistency metrics."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
OCCLUSION_TOL = 1.0


def _check_same(a, b):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"image shapes differ: {np.shape(a)} vs {np.shape(b)}")


def gaussian_window_1d(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - size // 2
    w = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return w / w.sum()


def _filter(img):
    """Separable Gaussian window over H and W with zero padding ("same" size)."""
    k = gaussian_window_1d()
    out = ndimage.correlate1d(img, k, axis=0, mode="constant", cval=0.0)
    return ndimage.correlate1d(out, k, axis=1, mode="constant", cval=0.0)


def ssim_with_grad(x, y):
    """Mean SSIM of ``x`` against ``y`` and its gradient with respect to ``x``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_same(x, y)
    mu_x, mu_y = _filter(x), _filter(y)
    e_xx, e_yy, e_xy = _filter(x * x), _filter(y * y), _filter(x * y)
    a1 = 2 * mu_x * mu_y + SSIM_C1
    a2 = 2 * (e_xy - mu_x * mu_y) + SSIM_C2
    b1 = mu_x ** 2 + mu_y ** 2 + SSIM_C1
    b2 = (e_xx - mu_x ** 2) + (e_yy - mu_y ** 2) + SSIM_C2
    s = (a1 * a2) / (b1 * b2)
    gs = 1.0 / s.size
    d_mu = gs * s * (2 * mu_y / a1 - 2 * mu_y / a2 - 2 * mu_x / b1 + 2 * mu_x / b2)
    d_exx = gs * (-s / b2)
    d_exy = gs * (2 * s / a2)
    grad = _filter(d_mu) + 2 * x * _filter(d_exx) + y * _filter(d_exy)
    return float(s.mean()), grad


def ssim(a, b) -> float:
    return ssim_with_grad(a, b)[0]


def dssim(a, b) -> float:
    """(1 - SSIM) / 2; both images must be at least window-sized."""
    _check_same(a, b)
    if min(np.shape(a)[:2]) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for D-SSIM")
    return (1.0 - ssim(a, b)) / 2.0


def psnr(a, b, region=None) -> float:
    """PSNR with peak 1; ``inf`` for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same(a, b)
    err = (a - b) ** 2
    if region is not None:
        region = np.asarray(region, dtype=bool)
        if region.shape != a.shape[:2]:
            raise ValueError("region mask does not match image")
        if not region.any():
            raise ValueError("region mask is empty")
        err = err[region]
    mse = float(err.mean())
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def bilinear_sample(img, x, y):
    """Sample ``img`` (H, W[, C]) at float coords with edge clamping."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    x = np.clip(x, 0.0, w - 1.0)
    y = np.clip(y, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.int64), w - 1)
    y0 = np.minimum(np.floor(y).astype(np.int64), h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    if img.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def warp(img, flow):
    """Backward warp: output(x) = img(x + flow(x))."""
    flow = np.asarray(flow, dtype=np.float64)
    h, w = flow.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return bilinear_sample(img, xs + flow[..., 0], ys + flow[..., 1])


def occlusion_mask(fwd, bwd, tol: float = OCCLUSION_TOL) -> np.ndarray:
    """Forward-backward consistent pixels (True = valid, not occluded)."""
    fwd = np.asarray(fwd, dtype=np.float64)
    bwd = np.asarray(bwd, dtype=np.float64)
    _check_same(fwd, bwd)
    h, w = fwd.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    tx = xs + fwd[..., 0]
    ty = ys + fwd[..., 1]
    inside = (tx >= 0) & (tx <= w - 1) & (ty >= 0) & (ty <= h - 1)
    back = bilinear_sample(bwd, tx, ty)
    err = np.hypot(fwd[..., 0] + back[..., 0], fwd[..., 1] + back[..., 1])
    return inside & (err < tol)


def e_pair(i_i, i_j, flow, mask) -> float:
    """Masked mean absolute difference between ``i_i`` and ``i_j`` warped onto it.

    ``flow`` holds, per pixel x of frame i, the offset to its match in frame j.
    """
    i_i = np.asarray(i_i, dtype=np.float64)
    _check_same(i_i, i_j)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return 0.0
    diff = np.abs(i_i - warp(i_j, flow))
    return float(diff[mask].sum() / (mask.sum() * i_i.shape[2]))


@dataclass
class WarpReport:
    epair_prev: list
    epair_zero: list
    e_warp: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def e_warp(frames, flows_prev, flows_zero, masks_prev, masks_zero) -> WarpReport:
    """Average of neighbor and anchor-to-frame-0 pair errors over frames 1..T-1.

    ``flows_prev[t-1]`` maps frame t pixels into frame t-1, ``flows_zero[t-1]``
    into frame 0; masks likewise.
    """
    t_count = len(frames)
    if t_count < 2:
        raise ValueError("need at least two frames")
    for name, lst in (("flows_prev", flows_prev), ("flows_zero", flows_zero),
                      ("masks_prev", masks_prev), ("masks_zero", masks_zero)):
        if len(lst) != t_count - 1:
            raise ValueError(f"{name} must have {t_count - 1} entries, got {len(lst)}")
    prev_terms, zero_terms = [], []
    for t in range(1, t_count):
        prev_terms.append(e_pair(frames[t], frames[t - 1], flows_prev[t - 1], masks_prev[t - 1]))
        zero_terms.append(e_pair(frames[t], frames[0], flows_zero[t - 1], masks_zero[t - 1]))
    total = sum(p + z for p, z in zip(prev_terms, zero_terms)) / (t_count - 1)
    return WarpReport(prev_terms, zero_terms, total)


CSV_HEADER = ["frame", "psnr_full", "psnr_dyn", "epair_prev", "epair_zero"]


def metrics_csv(rows) -> str:
    """CSV text for a list of dicts keyed by ``CSV_HEADER`` (extra keys ignored)."""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_HEADER, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: row.get(k, "") for k in CSV_HEADER})
    return buf.getvalue()
