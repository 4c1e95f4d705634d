"""Per-frame training: select motion-related Gaussians, deform them, recolor emerging content."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import flowmotion
from .gsplat import GaussianSet
from .metrics import ssim_with_grad
from .motionselect import DBSCAN_EPS, DBSCAN_MIN_SAMPLES, backproject, index_set, select_motion_related
from .ntc import (AdamConfig, HashGridConfig, TrainingDivergenceError, apply_deformation,
                  apply_gradients, apply_sh_offsets, deformation_backward, map_forward,
                  map_gradients, new_map)
from .raster import backward, render, render_gim

LOG_EVERY = 10


@dataclass
class TrainConfig:
    deform_iters: int = 100
    optim_iters: int = 100
    lam: float = 0.2
    attention_percentile: float = 99.0
    seed: int = 0
    lr_grid: float = 2e-2
    lr_mlp: float = 2e-3
    top_n: int = 1
    flow_tau: float = flowmotion.FLOW_TAU
    diff_threshold: float = flowmotion.DIFF_THRESHOLD
    morph_kernel: int = flowmotion.MORPH_KERNEL
    eps: float = DBSCAN_EPS
    min_samples: int = DBSCAN_MIN_SAMPLES
    use_clustering: bool = True
    grid: HashGridConfig = field(default_factory=HashGridConfig)

    def __post_init__(self):
        if self.deform_iters < 0 or self.optim_iters < 0:
            raise ValueError("iteration counts must be >= 0")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if not 0.0 < self.attention_percentile < 100.0:
            raise ValueError("attention percentile must lie in (0, 100)")

    def adam(self) -> AdamConfig:
        return AdamConfig(lr_grid=self.lr_grid, lr_mlp=self.lr_mlp)


def loss_color(rendered, gt, lam: float = 0.2):
    """``(1 - lam) * L1 + lam * D-SSIM`` and its gradient with respect to ``rendered``."""
    x = np.asarray(rendered, dtype=np.float64)
    y = np.asarray(gt, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    diff = x - y
    l1 = np.abs(diff).mean()
    g_l1 = np.sign(diff) / diff.size
    s, g_s = ssim_with_grad(x, y)
    loss = (1.0 - lam) * l1 + lam * (1.0 - s) / 2.0
    grad = (1.0 - lam) * g_l1 - lam * 0.5 * g_s
    return float(loss), grad


def _view_schedule(n_views: int, iters: int, seed: int) -> np.ndarray:
    """Round-robin over a seeded permutation of the views."""
    if n_views == 0:
        return np.zeros(0, dtype=np.int64)
    perm = np.random.default_rng(seed).permutation(n_views)
    return perm[np.arange(iters) % n_views]


def _check_loss(loss, it, stage):
    if not np.isfinite(loss):
        raise TrainingDivergenceError(f"non-finite {stage} loss at iteration {it}")


@dataclass
class StageResult:
    gaussians: GaussianSet
    nmap: object
    offsets: np.ndarray      # final raw network outputs for the selected Gaussians
    losses: list


def deform_stage(prev: GaussianSet, g_m, frames, cams, cfg: TrainConfig) -> StageResult:
    """Fit rigid offsets for ``g_m``; the network is queried at frozen previous positions."""
    g_m = index_set(g_m)
    fd = new_map(7, prev.bbox, seed=cfg.seed, grid=cfg.grid, adam=cfg.adam())
    if len(g_m) == 0 or cfg.deform_iters == 0:
        return StageResult(prev.copy(), fd, np.zeros((len(g_m), 7)), [])
    pos = prev.positions[g_m]
    losses = []
    for it, v in enumerate(_view_schedule(len(cams), cfg.deform_iters, cfg.seed)):
        out = map_forward(fd, pos)
        deformed = apply_deformation(prev, g_m, out[:, :3], out[:, 3:])
        loss, g_img = loss_color(render(deformed, cams[v]).rgb, frames[v], cfg.lam)
        _check_loss(loss, it, "deformation")
        losses.append(loss)
        g = backward(deformed, cams[v], g_img)
        g_du, g_dq = deformation_backward(prev, g_m, out[:, 3:], g.du[g_m], g.dq[g_m])
        grads_map = map_gradients(fd, pos, np.concatenate([g_du, g_dq], axis=1))
        apply_gradients(fd, grads_map)
    out = map_forward(fd, pos)
    return StageResult(apply_deformation(prev, g_m, out[:, :3], out[:, 3:]), fd, out, losses)


def attention_map(rendered, gt, percentile: float = 99.0):
    """Per view: pixels whose channel-mean L1 error exceeds that view's percentile."""
    masks = []
    for r, g in zip(rendered, gt):
        err = np.abs(np.asarray(r, dtype=np.float64) - np.asarray(g, dtype=np.float64)).mean(axis=2)
        tau = np.percentile(err, percentile)
        masks.append(err > tau)
    return masks


def select_new(g_m, deformed: GaussianSet, cams, attn, top_n: int = 1) -> np.ndarray:
    """Motion-related Gaussians seen (via the deformed GIM) under the attention masks."""
    g_m = index_set(g_m)
    for cam, mask in zip(cams, attn):
        if np.shape(mask) != (cam.height, cam.width):
            raise ValueError("attention mask does not match camera")
    if len(g_m) == 0 or not any(np.any(m) for m in attn):
        return index_set()
    gims = [render_gim(deformed, cam, top_n) for cam in cams]
    return np.intersect1d(g_m, backproject(gims, attn)).astype(np.int64)


def optimize_stage(deformed: GaussianSet, g_new, frames, cams, cfg: TrainConfig) -> StageResult:
    """Fit SH offsets for ``g_new`` with geometry frozen."""
    g_new = index_set(g_new)
    fc = new_map(12, deformed.bbox, seed=cfg.seed + 1, grid=cfg.grid, adam=cfg.adam())
    if len(g_new) == 0 or cfg.optim_iters == 0:
        return StageResult(deformed.copy(), fc, np.zeros((len(g_new), 12)), [])
    pos = deformed.positions[g_new]
    losses = []
    for it, v in enumerate(_view_schedule(len(cams), cfg.optim_iters, cfg.seed + 1)):
        dsh = map_forward(fc, pos)
        current = apply_sh_offsets(deformed, g_new, dsh)
        loss, g_img = loss_color(render(current, cams[v]).rgb, frames[v], cfg.lam)
        _check_loss(loss, it, "optimization")
        losses.append(loss)
        g = backward(current, cams[v], g_img)
        apply_gradients(fc, map_gradients(fc, pos, g.dsh[g_new]))
    dsh = map_forward(fc, pos)
    return StageResult(apply_sh_offsets(deformed, g_new, dsh), fc, dsh, losses)


@dataclass
class FrameResult:
    frame: int
    gaussians: GaussianSet
    g_m: np.ndarray
    g_new: np.ndarray
    g_o: np.ndarray
    deform_offsets: np.ndarray   # (|g_m|, 7) raw (du, dq)
    sh_offsets: np.ndarray       # (|g_new|, 12)
    deform_losses: list
    optim_losses: list
    iterations: int
    duration: float
    timings: dict
    masks: list = None
    attention: list = None
    deformed: GaussianSet = None

    def log(self) -> dict:
        """JSON-ready training log (losses every ``LOG_EVERY`` iterations)."""
        return {
            "frame": self.frame,
            "g_m": int(len(self.g_m)),
            "g_new": int(len(self.g_new)),
            "g_o": int(len(self.g_o)),
            "deform_losses": [[i, l] for i, l in enumerate(self.deform_losses) if i % LOG_EVERY == 0],
            "optim_losses": [[i, l] for i, l in enumerate(self.optim_losses) if i % LOG_EVERY == 0],
            "final_deform_loss": self.deform_losses[-1] if self.deform_losses else None,
            "final_optim_loss": self.optim_losses[-1] if self.optim_losses else None,
            "iterations": self.iterations,
            "timings": self.timings,
        }


def motion_masks(frames_t, frames_prev, flows, cfg: TrainConfig):
    return [flowmotion.frame_motion_mask(a, b, f, cfg.flow_tau, cfg.diff_threshold, cfg.morph_kernel)
            for a, b, f in zip(frames_t, frames_prev, flows)]


def process_frame(prev: GaussianSet, frames_t, frames_prev, cams, flows, cfg: TrainConfig,
                  frame_index: int = 0) -> FrameResult:
    """Run the whole per-frame pipeline on the training views ``cams``."""
    if not (len(frames_t) == len(frames_prev) == len(cams) == len(flows)):
        raise ValueError("frames, cameras and flows must cover the same views")
    t0 = time.perf_counter()
    timings = {}
    try:
        masks = motion_masks(frames_t, frames_prev, flows, cfg)
        gims = [render_gim(prev, cam, cfg.top_n) for cam in cams]
        sel = select_motion_related(prev.positions, gims, masks, cfg.eps, cfg.min_samples,
                                    cfg.use_clustering)
        t1 = time.perf_counter()
        timings["select"] = t1 - t0
        deform = deform_stage(prev, sel.g_m, frames_t, cams, cfg)
        t2 = time.perf_counter()
        timings["deform"] = t2 - t1
        if len(sel.g_m):
            rendered = [render(deform.gaussians, cam).rgb for cam in cams]
            attn = attention_map(rendered, frames_t, cfg.attention_percentile)
        else:
            attn = [np.zeros((c.height, c.width), dtype=bool) for c in cams]
        g_new = select_new(sel.g_m, deform.gaussians, cams, attn, cfg.top_n)
        optim = optimize_stage(deform.gaussians, g_new, frames_t, cams, cfg)
        t3 = time.perf_counter()
        timings["optimize"] = t3 - t2
    except TrainingDivergenceError as exc:
        raise TrainingDivergenceError(f"frame {frame_index}: {exc}") from exc
    return FrameResult(
        frame=frame_index, gaussians=optim.gaussians, g_m=sel.g_m, g_new=g_new, g_o=sel.g_o,
        deform_offsets=deform.offsets, sh_offsets=optim.offsets,
        deform_losses=deform.losses, optim_losses=optim.losses,
        iterations=len(deform.losses) + len(optim.losses),
        duration=time.perf_counter() - t0, timings=timings, masks=masks, attention=attn,
        deformed=deform.gaussians,
    )
