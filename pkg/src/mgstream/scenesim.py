"""Synthetic dynamic scenes with exact ground truth.

A scene is a set of blobs (balls of Gaussians or a textured backdrop wall)
seen by a frontal arc of cameras. Movers follow scripted rigid motions;
emerging blobs ride on a mover and carry ``color_before`` until their
appearance frame, then switch to ``color``. Geometry and the Gaussian count
never change, so emergence is purely an appearance change.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .gsplat import SH_C0, Camera, GaussianSet, quat_multiply, quat_to_rotmat
from .raster import render, render_gim

STATIC, MOVER, EMERGING = "static", "mover", "emerging"


@dataclass(frozen=True)
class BlobSpec:
    kind: str                         # static | mover | emerging
    center: tuple
    radius: float = 1.0
    count: int = 80
    color: tuple = (0.5, 0.5, 0.5)
    scale: float = 0.25
    opacity: float = 0.9
    velocity: tuple = (0.0, 0.0, 0.0)       # translation per frame
    spin: tuple = (0.0, 0.0, 0.0)           # axis-angle rotation per frame (about the blob center)
    shape: str = "ball"                     # ball | slab | wall
    depth: float = 0.3                      # slab: full thickness along z
    jitter: float = 0.12
    attach_to: int = -1                     # emerging: index of the carrying mover blob
    appear_frame: int = 1
    color_before: tuple = (0.5, 0.5, 0.5)   # emerging: color before appear_frame


@dataclass(frozen=True)
class RigSpec:
    azimuths: tuple = (5.0, -20.0, -7.0, 7.0, 20.0)     # degrees; camera 0 is held out
    elevations: tuple = (3.0, 5.0, -5.0, 5.0, -5.0)
    radius: float = 10.0
    focal: float = 80.0
    width: int = 64
    height: int = 64
    target: tuple = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class SceneSpec:
    name: str
    seed: int
    frames: int
    blobs: tuple
    rig: RigSpec = field(default_factory=RigSpec)

    def validate(self) -> None:
        if self.frames < 2:
            raise ValueError("a scene needs at least two frames")
        if len(self.rig.azimuths) < 2 or len(self.rig.azimuths) != len(self.rig.elevations):
            raise ValueError("need >= 2 cameras with matching azimuth/elevation lists")
        for i, b in enumerate(self.blobs):
            if b.kind not in (STATIC, MOVER, EMERGING):
                raise ValueError(f"blob {i}: unknown kind {b.kind!r}")
            if b.kind == EMERGING:
                if not 0 <= b.attach_to < len(self.blobs) or self.blobs[b.attach_to].kind != MOVER:
                    raise ValueError(f"blob {i}: emerging blobs must attach to a mover")
                if not 0 <= b.appear_frame < self.frames:
                    raise ValueError(f"blob {i}: appear_frame outside the sequence")


def make_cameras(rig: RigSpec) -> list[Camera]:
    cams = []
    target = np.asarray(rig.target, dtype=np.float64)
    for az, el in zip(rig.azimuths, rig.elevations):
        a, e = np.radians(az), np.radians(el)
        eye = target + rig.radius * np.array([np.sin(a) * np.cos(e), np.sin(e), np.cos(a) * np.cos(e)])
        cams.append(Camera.look_at(eye, target, (0.0, -1.0, 0.0), rig.focal, rig.focal,
                                   rig.width, rig.height))
    return cams


def _axis_angle_quat(v):
    v = np.asarray(v, dtype=np.float64)
    angle = np.linalg.norm(v)
    if angle == 0:
        return np.array([1.0, 0.0, 0.0, 0.0])
    axis = v / angle
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


def _blob_gaussians(b: BlobSpec, rng):
    if b.shape == "wall":
        side = int(round(np.sqrt(b.count)))
        step = 2 * b.radius / max(side - 1, 1)
        g = np.linspace(-b.radius, b.radius, side)
        xs, ys = np.meshgrid(g, g)
        pos = np.stack([xs.ravel(), ys.ravel(), np.zeros(xs.size)], axis=1) + np.asarray(b.center)
        n = len(pos)
        scales = np.column_stack([np.full(n, 0.6 * step), np.full(n, 0.6 * step), np.full(n, 0.05)])
        scales *= rng.uniform(0.9, 1.1, (n, 3))
        quats = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
        # two-tone checker plus per-Gaussian noise gives the flow estimator texture
        ix = np.rint((xs.ravel() + b.radius) / step).astype(int)
        iy = np.rint((ys.ravel() + b.radius) / step).astype(int)
        tone = np.where((ix // 2 + iy // 2) % 2 == 0, 1.0, 0.65)[:, None]
        colors = np.asarray(b.color) * tone
    elif b.shape == "slab":
        n = b.count
        half = np.array([b.radius, b.radius, b.depth / 2])
        pos = np.asarray(b.center) + rng.uniform(-1.0, 1.0, (n, 3)) * half
        scales = b.scale * rng.uniform(0.8, 1.2, (n, 3))
        quats = rng.normal(size=(n, 4))
        quats /= np.linalg.norm(quats, axis=1, keepdims=True)
        colors = np.tile(np.asarray(b.color, dtype=np.float64), (n, 1))
    else:
        n = b.count
        direction = rng.normal(size=(n, 3))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        # mostly surface shell with an interior fill
        r = b.radius * np.where(rng.random(n) < 0.7, rng.uniform(0.85, 1.0, n), rng.uniform(0.0, 0.85, n) ** (1 / 3))
        pos = np.asarray(b.center) + direction * r[:, None]
        scales = b.scale * rng.uniform(0.8, 1.2, (n, 3))
        quats = rng.normal(size=(n, 4))
        quats /= np.linalg.norm(quats, axis=1, keepdims=True)
        colors = np.tile(np.asarray(b.color, dtype=np.float64), (n, 1))
    colors = np.clip(colors + rng.uniform(-b.jitter, b.jitter, colors.shape), 0.02, 0.98)
    sh = np.zeros((len(pos), 3, 4))
    sh[:, :, 0] = colors / SH_C0
    return pos, quats, scales, sh.reshape(-1, 12)


@dataclass
class GroundTruth:
    spec: SceneSpec
    cameras: list
    sets: list                 # per-frame GaussianSet
    labels: list               # per-Gaussian "static" | "mover-k" | "emerging-k"
    groups: np.ndarray         # per-Gaussian blob index
    transforms: list           # per frame, per blob: (R 3x3, t 3) mapping frame-0 coords
    appear: dict               # emerging label -> appearance frame

    @property
    def n_frames(self) -> int:
        return len(self.sets)

    @property
    def n_views(self) -> int:
        return len(self.cameras)

    @property
    def heldout(self) -> int:
        return 0

    @property
    def train_views(self) -> list:
        return list(range(1, len(self.cameras)))

    @cached_property
    def images(self):
        """images[v][t] rendered from the exact frame-t sets."""
        return [[render(s, cam).rgb for s in self.sets] for cam in self.cameras]

    @cached_property
    def _top1(self):
        return [[render_gim(s, cam, 1).indices[..., 0] for s in self.sets] for cam in self.cameras]

    def top1(self, view: int, frame: int) -> np.ndarray:
        return self._top1[view][frame]

    def static_mask(self) -> np.ndarray:
        return np.array([lab == STATIC for lab in self.labels])

    def moving_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.static_mask())

    def label_indices(self, label: str) -> np.ndarray:
        return np.flatnonzero(np.array([lab == label for lab in self.labels]))

    def _pixel_points(self, view, frame):
        """3D point hit by each pixel's top-1 Gaussian (at that Gaussian's depth)."""
        cam = self.cameras[view]
        ids = self.top1(view, frame)
        pos = self.sets[frame].positions
        h, w = ids.shape
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        safe = np.maximum(ids, 0)
        depth = (pos[safe] @ cam.rotation.T + cam.translation)[..., 2]
        cam_pts = np.stack([(xs - cam.cx) / cam.fx * depth, (ys - cam.cy) / cam.fy * depth, depth], axis=-1)
        world = (cam_pts - cam.translation) @ cam.rotation
        return ids, world

    def flow(self, view: int, src: int, dst: int) -> np.ndarray:
        """Exact flow for pixels of frame ``src`` into frame ``dst`` (x_dst = x + flow)."""
        cam = self.cameras[view]
        ids, world = self._pixel_points(view, src)
        out = np.zeros(ids.shape + (2,))
        valid = ids >= 0
        g = self.groups[np.maximum(ids, 0)]
        moving = valid & ~self.static_mask()[np.maximum(ids, 0)]
        if not moving.any():
            return out
        h, w = ids.shape
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        for blob in np.unique(g[moving]):
            sel = moving & (g == blob)
            r_s, t_s = self.transforms[src][blob]
            r_d, t_d = self.transforms[dst][blob]
            p0 = (world[sel] - t_s) @ r_s          # back to frame-0 coordinates
            p = p0 @ r_d.T + t_d
            c = p @ cam.rotation.T + cam.translation
            out[sel, 0] = cam.fx * c[:, 0] / c[:, 2] + cam.cx - xs[sel]
            out[sel, 1] = cam.fy * c[:, 1] / c[:, 2] + cam.cy - ys[sel]
        return out

    def visibility(self, view: int, src: int, dst: int) -> np.ndarray:
        """Pixels of ``src`` whose surface is still the visible one at its ``dst`` location."""
        ids = self.top1(view, src)
        f = self.flow(view, src, dst)
        h, w = ids.shape
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        tx = np.rint(xs + f[..., 0]).astype(int)
        ty = np.rint(ys + f[..., 1]).astype(int)
        inside = (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h)
        dst_ids = self.top1(view, dst)[np.clip(ty, 0, h - 1), np.clip(tx, 0, w - 1)]
        same = np.where((ids >= 0) & (dst_ids >= 0),
                        self.groups[np.maximum(ids, 0)] == self.groups[np.maximum(dst_ids, 0)],
                        (ids < 0) & (dst_ids < 0))
        return inside & same

    def _nonstatic_top1(self, view, frame):
        ids = self.top1(view, frame)
        return (ids >= 0) & ~self.static_mask()[np.maximum(ids, 0)]

    def dynamic_mask(self, view: int, frame: int) -> np.ndarray:
        """Pixels whose top-1 Gaussian is non-static in ``frame`` or the frame before."""
        m = self._nonstatic_top1(view, frame)
        if frame > 0:
            m = m | self._nonstatic_top1(view, frame - 1)
        return m

    def moving_region(self, view: int, frame: int) -> np.ndarray:
        """Pixels of frame ``frame - 1`` whose top-1 Gaussian moves on the way to ``frame``."""
        ids = self.top1(view, frame - 1)
        valid = ids >= 0
        safe = np.maximum(ids, 0)
        moved = np.any(self.sets[frame].positions[safe] != self.sets[frame - 1].positions[safe], axis=-1)
        return valid & moved

    def emergence_mask(self, view: int, frame: int, thresh: float = 0.1) -> np.ndarray:
        """Pixels whose frame render changes if emerging blobs keep their old color."""
        before = self.sets[frame].copy()
        for i, b in enumerate(self.spec.blobs):
            if b.kind == EMERGING:
                shift = (np.asarray(b.color_before) - np.asarray(b.color)) / SH_C0
                before.sh[self.groups == i, 0::4] += shift
        diff = np.abs(render(before, self.cameras[view]).rgb - self.images[view][frame])
        return diff.max(axis=2) > thresh

    def object_mask(self, view: int, frame: int, label: str) -> np.ndarray:
        ids = self.top1(view, frame)
        members = np.zeros(len(self.labels) + 1, dtype=bool)
        members[self.label_indices(label)] = True
        return members[np.where(ids >= 0, ids, len(self.labels))]


def build_scene(spec: SceneSpec) -> GroundTruth:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    parts = [_blob_gaussians(b, rng) for b in spec.blobs]
    groups = np.concatenate([np.full(len(p[0]), i) for i, p in enumerate(parts)]).astype(np.int64)
    pos0 = np.concatenate([p[0] for p in parts])
    quat0 = np.concatenate([p[1] for p in parts])
    scales = np.concatenate([p[2] for p in parts])
    sh = np.concatenate([p[3] for p in parts])
    sh_before = sh.copy()
    for i, b in enumerate(spec.blobs):
        if b.kind == EMERGING:
            sel = groups == i
            shift = (np.asarray(b.color_before) - np.asarray(b.color)) / SH_C0
            sh_before[sel, 0::4] += shift
    counters = {MOVER: 0, EMERGING: 0}
    blob_labels = []
    for b in spec.blobs:
        if b.kind == STATIC:
            blob_labels.append(STATIC)
        else:
            blob_labels.append(f"{b.kind}-{counters[b.kind]}")
            counters[b.kind] += 1
    labels = [blob_labels[g] for g in groups]
    centers = [np.asarray(b.center, dtype=np.float64) for b in spec.blobs]

    def motion_of(i, t):
        b = spec.blobs[i]
        if b.kind == EMERGING:
            return motion_of(b.attach_to, t)
        if b.kind == STATIC:
            return np.eye(3), np.zeros(3), np.array([1.0, 0, 0, 0])
        q = _axis_angle_quat(np.asarray(b.spin) * t)
        r = quat_to_rotmat(q)
        c = centers[i]
        # x -> R (x - c) + c + t v
        return r, c - r @ c + t * np.asarray(b.velocity, dtype=np.float64), q

    transforms, sets = [], []
    appear = {}
    for i, b in enumerate(spec.blobs):
        if b.kind == EMERGING:
            appear[blob_labels[i]] = b.appear_frame
    for t in range(spec.frames):
        tr = [motion_of(i, t) for i in range(len(spec.blobs))]
        transforms.append([(r, tt) for r, tt, _ in tr])
        pos = np.empty_like(pos0)
        quats = np.empty_like(quat0)
        opac = np.empty(len(pos0))
        cur_sh = sh.copy()
        for i, (r, tt, q) in enumerate(tr):
            sel = groups == i
            pos[sel] = pos0[sel] @ r.T + tt
            quats[sel] = quat_multiply(q, quat0[sel])
            b = spec.blobs[i]
            opac[sel] = b.opacity
            if b.kind == EMERGING and t < b.appear_frame:
                cur_sh[sel] = sh_before[sel]
        quats /= np.linalg.norm(quats, axis=1, keepdims=True)
        gs = GaussianSet(pos, quats, scales, opac, cur_sh).as_float32_exact()
        if t == 0:
            # frame-0 box from the stored (float32) positions, so reloads agree
            bbox = GaussianSet(gs.positions, gs.quats, gs.scales, gs.opacities, gs.sh).bbox
        gs.bbox = bbox.copy()
        sets.append(gs)
    return GroundTruth(spec, make_cameras(spec.rig), sets, labels, groups, transforms, appear)


# --------------------------------------------------------------------------
# pinned scenes

WALL = BlobSpec(STATIC, (0.0, 0.0, -3.0), radius=4.5, count=576, color=(0.75, 0.7, 0.45),
                shape="wall", opacity=0.95, jitter=0.15)


def card(center, color, velocity=(0.0, 0.0, 0.0), spin=(0.0, 0.0, 0.0), radius=1.0, count=200,
         scale=None):
    """Thin textured mover facing the camera arc (nearly every member is visible)."""
    if scale is None:
        scale = 0.375 * np.sqrt(90 / count)
    return BlobSpec(MOVER, center, radius=radius, count=count, color=color, velocity=velocity,
                    spin=spin, shape="slab", depth=0.05, scale=scale, jitter=0.25)


def mover_variant(n_movers: int = 1, frames: int = 10, seed: int = 7) -> SceneSpec:
    """Backdrop plus ``n_movers`` rigid cards (1 gives the "mover" scene)."""
    if n_movers == 1:
        movers = (card((-1.2, 0.0, 0.0), (0.2, 0.4, 0.9), (0.22, 0.0, 0.0), (0.0, 0.03, 0.0)),)
    elif n_movers == 2:
        movers = (card((-1.6, -1.2, 0.0), (0.2, 0.4, 0.9), (0.22, 0.0, 0.0), (0.0, 0.03, 0.0)),
                  card((1.4, 1.4, 0.4), (0.2, 0.85, 0.3), (0.0, -0.2, 0.0), (0.0, 0.0, 0.03)))
    else:
        raise ValueError("mover variants exist for 1 or 2 movers")
    name = "mover" if n_movers == 1 else f"mover-x{n_movers}"
    return SceneSpec(name, seed, frames, (WALL,) + movers)


def standard_scenes() -> dict[str, SceneSpec]:
    return {
        "mover": mover_variant(1),
        "two-movers-static-between": SceneSpec("two-movers-static-between", 11, 4, (
            WALL,
            card((-2.6, 0.0, -0.7), (0.2, 0.4, 0.9), (0.0, 0.2, 0.0), radius=0.8, count=60),
            BlobSpec(STATIC, (0.0, 0.0, 0.0), radius=0.9, count=80, color=(0.9, 0.6, 0.2)),
            card((2.6, 0.0, 0.7), (0.2, 0.85, 0.3), (0.0, -0.2, 0.0), radius=0.8, count=60),
        )),
        "emerging": SceneSpec("emerging", 5, 3, (
            WALL,
            # fewer, smaller card Gaussians so the patch is not buried under them
            card((-1.2, 0.0, 0.0), (0.2, 0.4, 0.9), (0.22, 0.0, 0.0), count=70, scale=0.28),
            BlobSpec(EMERGING, (-1.2, 0.0, 0.05), radius=0.35, count=14, color=(0.95, 0.15, 0.1),
                     color_before=(0.2, 0.4, 0.9), shape="slab", depth=0.05, scale=0.14,
                     opacity=0.95, attach_to=1, appear_frame=1, jitter=0.03),
        )),
        "static": SceneSpec("static", 3, 4, (
            WALL,
            BlobSpec(STATIC, (-1.5, 0.5, 0.0), radius=1.0, count=70, color=(0.2, 0.4, 0.9)),
            BlobSpec(STATIC, (1.6, -0.6, 0.3), radius=0.8, count=60, color=(0.9, 0.6, 0.2)),
        )),
    }
