"""Streaming pipeline: on-disk formats, scene export, per-frame deltas, replay, frame-0 fit."""
from __future__ import annotations

import csv
import io
import json
import struct
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .flowmotion import estimate_flow, load_flow, save_flow
from .formats import (FormatError, atomic_write, check_magic, crc32, decode_index_list,
                      encode_index_list, load_image_raw, load_png, magic_bytes, save_image_raw,
                      save_png)
from .gsplat import Camera, GaussianSet
from .metrics import e_pair, occlusion_mask, psnr
from .motionselect import index_set
from .ntc import DegenerateRotationError, TrainingDivergenceError, apply_deformation, apply_sh_offsets
from .raster import backward, render
from .trainer import loss_color, process_frame

# --------------------------------------------------------------------------
# Gaussian sets (MGSPLY1): magic, u32 count, u32 crc, then 23 float32 per Gaussian

PLY_TAG = "MGSPLY1"
PLY_HEADER = 16
PLY_RECORD = 23 * 4


def gaussians_to_bytes(gs: GaussianSet) -> bytes:
    rec = np.concatenate([gs.positions, gs.quats, gs.scales, gs.opacities[:, None], gs.sh], axis=1)
    payload = np.ascontiguousarray(rec, dtype="<f4").tobytes()
    return magic_bytes(PLY_TAG) + struct.pack("<II", len(gs), crc32(payload)) + payload


def gaussians_from_bytes(buf: bytes) -> GaussianSet:
    check_magic(buf, PLY_TAG)
    if len(buf) < PLY_HEADER:
        raise FormatError("truncated MGSPLY1 header", len(buf))
    count, crc = struct.unpack_from("<II", buf, 8)
    need = PLY_HEADER + PLY_RECORD * count
    if len(buf) != need:
        raise FormatError(f"MGSPLY1 count {count} needs {need} bytes, file has {len(buf)}",
                          min(len(buf), need))
    payload = buf[PLY_HEADER:]
    if crc32(payload) != crc:
        raise FormatError("MGSPLY1 checksum mismatch", PLY_HEADER)
    rec = np.frombuffer(payload, dtype="<f4").reshape(count, 23).astype(np.float64)
    return GaussianSet(rec[:, 0:3], rec[:, 3:7], rec[:, 7:10], rec[:, 10], rec[:, 11:23])


def save_gaussians(gs: GaussianSet, path) -> None:
    atomic_write(path, gaussians_to_bytes(gs))


def load_gaussians(path) -> GaussianSet:
    return gaussians_from_bytes(Path(path).read_bytes())


# --------------------------------------------------------------------------
# per-frame deltas (MGSDLT1)
#
# header (32 bytes): magic, u32 frame, u32 n_total, u32 |G_m|, u32 |G_new|,
#                    u32 bytes of G_m index list, u32 crc of the payload
# payload: G_m varint gaps, G_new varint gaps, |G_m| x (du 3f, dq 4f), |G_new| x (dsh 12f)

DELTA_TAG = "MGSDLT1"
DELTA_HEADER = 32
_DELTA_FIELDS = struct.Struct("<6I")
M_RECORD = 7 * 4
NEW_RECORD = 12 * 4


@dataclass
class FrameDelta:
    frame: int
    n_total: int
    g_m: np.ndarray
    du: np.ndarray      # (|G_m|, 3) float32
    dq: np.ndarray      # (|G_m|, 4) float32, raw rotation offsets
    g_new: np.ndarray
    dsh: np.ndarray     # (|G_new|, 12) float32

    def __post_init__(self):
        self.g_m = index_set(self.g_m)
        self.g_new = index_set(self.g_new)
        self.du = np.asarray(self.du, dtype=np.float32).reshape(len(self.g_m), 3)
        self.dq = np.asarray(self.dq, dtype=np.float32).reshape(len(self.g_m), 4)
        self.dsh = np.asarray(self.dsh, dtype=np.float32).reshape(len(self.g_new), 12)

    def validate(self) -> None:
        if len(self.g_m) and (self.g_m[0] < 0 or self.g_m[-1] >= self.n_total):
            raise FormatError("G_m index out of range")
        if not np.all(np.isin(self.g_new, self.g_m)):
            raise FormatError("G_new is not a subset of G_m")

    @classmethod
    def empty(cls, frame: int, n_total: int) -> "FrameDelta":
        return cls(frame, n_total, [], np.zeros((0, 3)), np.zeros((0, 4)), [], np.zeros((0, 12)))

    @classmethod
    def from_result(cls, result, n_total: int) -> "FrameDelta":
        off = np.asarray(result.deform_offsets)
        return cls(result.frame, n_total, result.g_m, off[:, :3], off[:, 3:], result.g_new,
                   result.sh_offsets)


def delta_size(n_m: int, n_new: int, index_bytes: int) -> int:
    """Byte size of a delta file from its layout."""
    return DELTA_HEADER + index_bytes + M_RECORD * n_m + NEW_RECORD * n_new


def delta_to_bytes(delta: FrameDelta) -> bytes:
    delta.validate()
    idx_m = encode_index_list(delta.g_m)
    idx_new = encode_index_list(delta.g_new)
    records = np.concatenate([delta.du, delta.dq], axis=1).astype("<f4")
    payload = idx_m + idx_new + records.tobytes() + delta.dsh.astype("<f4").tobytes()
    head = _DELTA_FIELDS.pack(delta.frame, delta.n_total, len(delta.g_m), len(delta.g_new),
                              len(idx_m), crc32(payload))
    return magic_bytes(DELTA_TAG) + head + payload


def delta_from_bytes(buf: bytes) -> FrameDelta:
    check_magic(buf, DELTA_TAG)
    if len(buf) < DELTA_HEADER:
        raise FormatError("truncated MGSDLT1 header", len(buf))
    frame, n_total, n_m, n_new, len_m, crc = _DELTA_FIELDS.unpack_from(buf, 8)
    payload = buf[DELTA_HEADER:]
    if crc32(payload) != crc:
        raise FormatError("MGSDLT1 checksum mismatch", DELTA_HEADER)
    g_m, pos = decode_index_list(buf, n_m, DELTA_HEADER)
    if pos != DELTA_HEADER + len_m:
        raise FormatError("G_m index list length mismatch", pos)
    g_new, pos = decode_index_list(buf, n_new, pos)
    need = delta_size(n_m, n_new, pos - DELTA_HEADER)
    if len(buf) != need:
        raise FormatError(f"MGSDLT1 layout needs {need} bytes, file has {len(buf)}", min(len(buf), need))
    for name, idx in (("G_m", g_m), ("G_new", g_new)):
        if len(idx) and idx[-1] >= n_total:
            raise FormatError(f"{name} index {idx[-1]} out of range for {n_total} Gaussians", DELTA_HEADER)
    rec = np.frombuffer(buf, dtype="<f4", count=7 * n_m, offset=pos).reshape(n_m, 7)
    dsh = np.frombuffer(buf, dtype="<f4", count=12 * n_new, offset=pos + M_RECORD * n_m).reshape(n_new, 12)
    delta = FrameDelta(frame, n_total, g_m, rec[:, :3], rec[:, 3:], g_new, dsh)
    delta.validate()
    return delta


def apply_delta(prev: GaussianSet, delta: FrameDelta) -> GaussianSet:
    """Frame-t set from frame t-1 and its delta, rounded to float32 storage precision."""
    delta.validate()
    if delta.n_total != len(prev):
        raise FormatError(f"delta is for {delta.n_total} Gaussians, set has {len(prev)}")
    try:
        out = apply_deformation(prev, delta.g_m, delta.du.astype(np.float64), delta.dq.astype(np.float64))
    except DegenerateRotationError as exc:
        raise FormatError(f"delta holds a degenerate rotation offset: {exc}") from None
    out = apply_sh_offsets(out, delta.g_new, delta.dsh.astype(np.float64))
    return out.as_float32_exact()


def save_delta(delta: FrameDelta, path) -> int:
    data = delta_to_bytes(delta)
    atomic_write(path, data)
    return len(data)


def load_delta(path) -> FrameDelta:
    return delta_from_bytes(Path(path).read_bytes())


def load_and_apply(prev: GaussianSet, path) -> GaussianSet:
    return apply_delta(prev, load_delta(path))


# --------------------------------------------------------------------------
# scene directories


@dataclass
class SceneData:
    root: Path
    name: str
    cameras: list
    heldout: int
    train_views: list
    n_frames: int

    def image(self, view: int, frame: int) -> np.ndarray:
        return load_image_raw(self.root / "frames" / f"v{view}_t{frame:04d}.img")

    def flow_path(self, view: int, frame: int) -> Path:
        """Flow from frame-1 to frame on frame-1 pixels."""
        return self.root / "flows" / f"v{view}_t{frame:04d}.flo"

    def warp_path(self, view: int, src: int, dst: int) -> Path:
        return self.root / "gt" / f"warp_v{view}_{src:04d}_{dst:04d}.flo"

    def dynamic_mask(self, view: int, frame: int):
        path = self.root / "gt" / f"dyn_v{view}_t{frame:04d}.png"
        return load_png(path) if path.exists() else None


def export_scene(gt, outdir) -> SceneData:
    """Write a simulated scene as a directory of frames, flows, GT masks and frame-0 Gaussians."""
    root = Path(outdir)
    h = gt.heldout
    meta = {
        "name": gt.spec.name, "n_frames": gt.n_frames, "heldout": h,
        "train_views": gt.train_views, "cameras": [c.to_dict() for c in gt.cameras],
    }
    for v, cam in enumerate(gt.cameras):
        atomic_write(root / "cameras" / f"cam{v}.json", json.dumps(cam.to_dict(), indent=1).encode())
        for t in range(gt.n_frames):
            save_image_raw(gt.images[v][t], root / "frames" / f"v{v}_t{t:04d}.img")
            save_png(gt.images[v][t], root / "frames" / f"v{v}_t{t:04d}.png")
            if t > 0:
                save_flow(gt.flow(v, t - 1, t), root / "flows" / f"v{v}_t{t:04d}.flo")
            save_png(gt.dynamic_mask(v, t), root / "gt" / f"dyn_v{v}_t{t:04d}.png")
    for t in range(1, gt.n_frames):
        for s in {t - 1, 0}:
            save_flow(gt.flow(h, t, s), root / "gt" / f"warp_v{h}_{t:04d}_{s:04d}.flo")
            save_flow(gt.flow(h, s, t), root / "gt" / f"warp_v{h}_{s:04d}_{t:04d}.flo")
    for t, gs in enumerate(gt.sets):
        save_gaussians(gs, root / "gt" / f"gaussians_t{t:04d}.mgs")
    save_gaussians(gt.sets[0], root / "gaussians" / "frame0.mgs")
    atomic_write(root / "gt" / "labels.json", json.dumps(gt.labels).encode())
    atomic_write(root / "scene.json", json.dumps(meta, indent=1).encode())
    return load_scene(root)


def load_scene(root) -> SceneData:
    root = Path(root)
    try:
        meta = json.loads((root / "scene.json").read_text())
        cams = [Camera.from_dict(d) for d in meta["cameras"]]
        return SceneData(root, meta["name"], cams, int(meta["heldout"]),
                         [int(v) for v in meta["train_views"]], int(meta["n_frames"]))
    except (OSError, KeyError, ValueError) as exc:
        raise FormatError(f"cannot read scene directory {root}: {exc}") from None


# --------------------------------------------------------------------------
# stream


REPORT_COLUMNS = ["frame", "psnr_full", "psnr_dyn", "epair_prev", "epair_zero", "g_m", "g_new", "bytes"]


@dataclass
class StreamReport:
    rows: list
    e_warp: float
    frame0_bytes: int
    delta_bytes: list
    out_dir: Path

    def storage(self) -> dict:
        total = sum(self.delta_bytes)
        return {
            "frame0_bytes": self.frame0_bytes,
            "delta_bytes_total": total,
            "delta_bytes_mean": total / len(self.delta_bytes) if self.delta_bytes else 0.0,
            "total_including_initial": total + self.frame0_bytes,
            "total_excluding_initial": total,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in self.rows:
            w.writerow({k: row[k] for k in REPORT_COLUMNS})
        return buf.getvalue()

    def to_json(self, config: PipelineConfig) -> str:
        return json.dumps({"config": config.to_text().splitlines(), "frames": self.rows,
                           "e_warp": self.e_warp, "storage": self.storage()}, indent=1)


def _delta_path(out: Path, t: int) -> Path:
    return out / "deltas" / f"frame_{t:04d}.mgd"


def _stream_flows(scene: SceneData, cfg: PipelineConfig, t: int, prev_imgs, cur_imgs):
    if cfg.flow == "gt":
        try:
            return [load_flow(scene.flow_path(v, t)) for v in scene.train_views]
        except FileNotFoundError as exc:
            raise FormatError(f"missing flow file: {exc.filename}") from None
    return [estimate_flow(a, b) for a, b in zip(prev_imgs, cur_imgs)]


def _warp_pair(scene: SceneData, renders, t: int, s: int, region=None) -> float:
    """e_pair of frame t against frame s on the held-out view, occlusion-masked."""
    h = scene.heldout
    fwd_path, bwd_path = scene.warp_path(h, t, s), scene.warp_path(h, s, t)
    if fwd_path.exists() and bwd_path.exists():
        fwd, bwd = load_flow(fwd_path), load_flow(bwd_path)
    else:
        fwd, bwd = estimate_flow(renders[t], renders[s]), estimate_flow(renders[s], renders[t])
    mask = occlusion_mask(fwd, bwd)
    if region is not None:
        mask &= region
    return e_pair(renders[t], renders[s], fwd, mask)


def stream_e_warp(scene: SceneData, renders, regions=None):
    """Per-frame (prev, zero) pair errors and the aggregate over the rendered sequence."""
    prev_terms, zero_terms = [], []
    for t in range(1, len(renders)):
        region = None if regions is None else regions[t]
        prev_terms.append(_warp_pair(scene, renders, t, t - 1, region))
        zero_terms.append(_warp_pair(scene, renders, t, 0, region))
    total = sum(p + z for p, z in zip(prev_terms, zero_terms)) / max(len(renders) - 1, 1)
    return prev_terms, zero_terms, total


def run_stream(scene_dir, cfg: PipelineConfig, out_dir=None) -> StreamReport:
    """Process frames 1..T-1, writing one delta per frame plus report/logs."""
    scene = load_scene(scene_dir)
    out = Path(out_dir) if out_dir is not None else scene.root / cfg.output
    n_frames = scene.n_frames if cfg.frames == 0 else min(cfg.frames, scene.n_frames)
    prev = load_gaussians(scene.root / cfg.init)
    train_cams = [scene.cameras[v] for v in scene.train_views]
    h = scene.heldout
    tcfg = cfg.train_config()
    for stale in sorted((out / "deltas").glob("frame_*.mgd")):
        stale.unlink()
    frame0_bytes = len(gaussians_to_bytes(prev))
    atomic_write(out / "config.txt", cfg.to_text().encode())
    renders = [render(prev, scene.cameras[h]).rgb]
    rows, sizes, timings = [], [], []
    prev_imgs = [scene.image(v, 0) for v in scene.train_views]
    for t in range(1, n_frames):
        cur_imgs = [scene.image(v, t) for v in scene.train_views]
        flows = _stream_flows(scene, cfg, t, prev_imgs, cur_imgs)
        result = process_frame(prev, cur_imgs, prev_imgs, train_cams, flows, tcfg, frame_index=t)
        delta = FrameDelta.from_result(result, len(prev))
        size = save_delta(delta, _delta_path(out, t))
        prev = apply_delta(prev, delta)
        img = render(prev, scene.cameras[h]).rgb
        renders.append(img)
        gt_img = scene.image(h, t)
        dyn = scene.dynamic_mask(h, t)
        rows.append({
            "frame": t, "psnr_full": psnr(img, gt_img),
            "psnr_dyn": psnr(img, gt_img, dyn) if dyn is not None and dyn.any() else None,
            "g_m": int(len(delta.g_m)), "g_new": int(len(delta.g_new)), "bytes": size,
        })
        sizes.append(size)
        log = result.log()
        timings.append({"frame": t, **log.pop("timings"), "total": result.duration})
        atomic_write(out / "logs" / f"frame_{t:04d}.json", json.dumps(log, indent=1).encode())
        prev_imgs = cur_imgs
    if n_frames > 1:
        prev_terms, zero_terms, total = stream_e_warp(scene, renders)
    else:
        prev_terms, zero_terms, total = [], [], 0.0
    for row, p, z in zip(rows, prev_terms, zero_terms):
        row["epair_prev"], row["epair_zero"] = p, z
    report = StreamReport(rows, total, frame0_bytes, sizes, out)
    atomic_write(out / "report.csv", report.to_csv().encode())
    atomic_write(out / "report.json", report.to_json(cfg).encode())
    atomic_write(out / "timings.json", json.dumps(timings, indent=1).encode())
    return report


def replay(init: GaussianSet, delta_paths) -> list[GaussianSet]:
    """Frame sets reconstructed from frame 0 and the ordered delta files."""
    sets = [init]
    for path in delta_paths:
        sets.append(load_and_apply(sets[-1], path))
    return sets


def replay_stream(scene_dir, cfg: PipelineConfig, out_dir=None) -> list[GaussianSet]:
    scene = load_scene(scene_dir)
    out = Path(out_dir) if out_dir is not None else scene.root / cfg.output
    return replay(load_gaussians(scene.root / cfg.init), sorted((out / "deltas").glob("frame_*.mgd")))


def evaluate(scene_dir, cfg: PipelineConfig, out_dir=None) -> dict:
    """Replay the stored deltas and score held-out renders against the captured frames."""
    scene = load_scene(scene_dir)
    sets = replay_stream(scene_dir, cfg, out_dir)
    h = scene.heldout
    renders = [render(s, scene.cameras[h]).rgb for s in sets]
    frames = []
    for t in range(1, len(sets)):
        gt_img = scene.image(h, t)
        dyn = scene.dynamic_mask(h, t)
        frames.append({"frame": t, "psnr_full": psnr(renders[t], gt_img),
                       "psnr_dyn": psnr(renders[t], gt_img, dyn) if dyn is not None and dyn.any() else None})
    e_warp = stream_e_warp(scene, renders)[2] if len(renders) > 1 else 0.0
    return {"frames": frames, "e_warp": e_warp,
            "mean_psnr_full": float(np.mean([f["psnr_full"] for f in frames])) if frames else None}


# --------------------------------------------------------------------------
# frame-0 fit


@dataclass
class FitConfig:
    iters: int = 2000
    n_gaussians: int = 200
    seed: int = 0
    lam: float = 0.2
    lr_position: float = 1e-2     # relative to the init box half-size
    lr_quat: float = 1e-2
    lr_opacity: float = 5e-2
    lr_sh: float = 2.5e-2
    lr_scale: float = 1e-2        # on log-scales; 0 keeps scales fixed
    log_every: int = 100


def _axes_focus(cams):
    """Least-squares point nearest to every camera's optical axis."""
    a = np.zeros((3, 3))
    b = np.zeros(3)
    for cam in cams:
        d = cam.rotation[2]
        p = np.eye(3) - np.outer(d, d)
        a += p
        b += p @ cam.center
    return np.linalg.lstsq(a, b, rcond=None)[0]


def _visible_in_all(points, cams, margin=2.0):
    ok = np.ones(len(points), dtype=bool)
    for cam in cams:
        c = points @ cam.rotation.T + cam.translation
        z = np.maximum(c[:, 2], 1e-9)
        x = cam.fx * c[:, 0] / z + cam.cx
        y = cam.fy * c[:, 1] / z + cam.cy
        ok &= (c[:, 2] > 0.1) & (x > margin) & (x < cam.width - margin) & (y > margin) & (y < cam.height - margin)
    return ok


def init_frame0(cams, n: int, seed: int = 0) -> GaussianSet:
    """Random Gaussians inside the region every camera sees."""
    rng = np.random.default_rng(seed)
    focus = _axes_focus(cams)
    half = 0.45 * np.mean([np.linalg.norm(c.center - focus) for c in cams])
    pts = np.zeros((0, 3))
    while len(pts) < n:
        cand = focus + rng.uniform(-half, half, (4 * n, 3))
        pts = np.concatenate([pts, cand[_visible_in_all(cand, cams)]])
    pts = pts[:n]
    size = half / n ** (1 / 3)
    scales = size * rng.uniform(0.6, 1.2, (n, 3))
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    sh = np.zeros((n, 3, 4))
    sh[:, :, 0] = rng.uniform(0.3, 0.7, (n, 3)) / 0.28209479177387814
    return GaussianSet(pts, quats, scales, np.full(n, 0.5), sh.reshape(n, 12)).as_float32_exact()


class _Adam:
    def __init__(self, shape, lr):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.lr = lr
        self.t = 0

    def step(self, param, grad):
        self.t += 1
        self.m = 0.9 * self.m + 0.1 * grad
        self.v = 0.999 * self.v + 0.001 * grad * grad
        m_hat = self.m / (1 - 0.9 ** self.t)
        v_hat = self.v / (1 - 0.999 ** self.t)
        return param - self.lr * m_hat / (np.sqrt(v_hat) + 1e-15)


def fit_frame0(frames, cams, iters: int = 2000, cfg: FitConfig | None = None, init=None):
    """Fixed-count fit of positions, rotations, opacities, SH and scales (no densification).

    Returns ``(gaussians, losses)``; opacities are optimized through a logit and
    scales through their logarithm.
    """
    cfg = cfg or FitConfig()
    if len(cams) < 2 or len(frames) != len(cams):
        raise ValueError("fitting needs >= 2 views with one frame each")
    gs = init_frame0(cams, cfg.n_gaussians, cfg.seed) if init is None else init.copy()
    losses = []
    if iters == 0:
        return gs, losses
    half = 0.45 * np.mean([np.linalg.norm(c.center - _axes_focus(cams)) for c in cams])
    logit = np.log(np.clip(gs.opacities, 1e-4, 1 - 1e-4) / (1 - np.clip(gs.opacities, 1e-4, 1 - 1e-4)))
    opt = {"u": _Adam(gs.positions.shape, cfg.lr_position * half),
           "q": _Adam(gs.quats.shape, cfg.lr_quat),
           "o": _Adam(logit.shape, cfg.lr_opacity),
           "sh": _Adam(gs.sh.shape, cfg.lr_sh),
           "s": _Adam(gs.scales.shape, cfg.lr_scale)}
    log_s = np.log(gs.scales)
    order = np.random.default_rng(cfg.seed).permutation(len(cams))
    for it in range(iters):
        v = order[it % len(cams)]
        loss, g_img = loss_color(render(gs, cams[v]).rgb, frames[v], cfg.lam)
        if not np.isfinite(loss):
            raise TrainingDivergenceError(f"non-finite fit loss at iteration {it}")
        losses.append(loss)
        g = backward(gs, cams[v], g_img)
        sig = 1.0 / (1.0 + np.exp(-logit))
        gs.positions = opt["u"].step(gs.positions, g.du)
        q = opt["q"].step(gs.quats, g.dq)
        gs.quats = q / np.linalg.norm(q, axis=1, keepdims=True)
        logit = opt["o"].step(logit, g.dopacity * sig * (1 - sig))
        gs.opacities = 1.0 / (1.0 + np.exp(-logit))
        gs.sh = opt["sh"].step(gs.sh, g.dsh)
        if cfg.lr_scale > 0:
            log_s = opt["s"].step(log_s, g.dscale * gs.scales)
            gs.scales = np.exp(log_s)
        if not all(np.all(np.isfinite(a)) for a in (gs.positions, gs.quats, gs.opacities, gs.sh)):
            raise TrainingDivergenceError(f"non-finite parameters after fit iteration {it}")
    out = gs.as_float32_exact()
    out.bbox = GaussianSet(out.positions, out.quats, out.scales, out.opacities, out.sh).bbox
    return out, losses


def fit_scene(scene_dir, iters: int, cfg: FitConfig | None = None):
    """Fit frame 0 of a scene directory from its training views; writes gaussians/frame0_fit.mgs."""
    scene = load_scene(scene_dir)
    frames = [scene.image(v, 0) for v in scene.train_views]
    cams = [scene.cameras[v] for v in scene.train_views]
    t0 = time.perf_counter()
    gs, losses = fit_frame0(frames, cams, iters, cfg)
    save_gaussians(gs, scene.root / "gaussians" / "frame0_fit.mgs")
    h = scene.heldout
    score = psnr(render(gs, scene.cameras[h]).rgb, scene.image(h, 0))
    return gs, {"iters": iters, "heldout_psnr": score, "first_loss": losses[0] if losses else None,
                "final_loss": losses[-1] if losses else None, "seconds": time.perf_counter() - t0}
