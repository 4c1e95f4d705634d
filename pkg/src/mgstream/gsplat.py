"""Gaussian scene representation and the shared geometric math.

Conventions used throughout the package:

* quaternions are (w, x, y, z), composed with the Hamilton product and acting
  on column vectors;
* SH coefficients are degree 1, stored channel-major as 12 reals
  ``[r0, r1, r2, r3, g0, ..., b3]``;
* cameras map world points with ``x_cam = R @ x_world + t`` and look down +z.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
NEAR_PLANE = 0.01
COV2D_BLUR = 0.3


class DegenerateInputError(ValueError):
    """Raised for zero-norm quaternions, non-positive scales and similar."""


# --------------------------------------------------------------------------
# quaternions


def quat_multiply(a, b):
    """Hamilton product ``a * b`` over the trailing axis."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_conjugate(q):
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_left_matrix(a):
    """Matrix ``L(a)`` with ``quat_multiply(a, b) == L(a) @ b``."""
    a = np.asarray(a, dtype=np.float64)
    w, x, y, z = np.moveaxis(a, -1, 0)
    rows = [
        [w, -x, -y, -z],
        [x, w, -z, y],
        [y, z, w, -x],
        [z, -y, x, w],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def quat_right_matrix(b):
    """Matrix ``R(b)`` with ``quat_multiply(a, b) == R(b) @ a``."""
    b = np.asarray(b, dtype=np.float64)
    w, x, y, z = np.moveaxis(b, -1, 0)
    rows = [
        [w, -x, -y, -z],
        [x, w, z, -y],
        [y, -z, w, x],
        [z, y, -x, w],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def normalize_quat(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise DegenerateInputError("zero-norm quaternion")
    return q / n


def _unit_rotmat(q):
    w, x, y, z = np.moveaxis(q, -1, 0)
    rows = [
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def quat_to_rotmat(q):
    """Rotation matrix of ``q`` (normalized internally). Batched over leading axes."""
    return _unit_rotmat(normalize_quat(q))


def rotmat_jacobian(qn):
    """d R / d q for unit quaternions ``qn``; shape (..., 3, 3, 4)."""
    w, x, y, z = np.moveaxis(np.asarray(qn, dtype=np.float64), -1, 0)
    zero = np.zeros_like(w)
    # each entry: (dw, dx, dy, dz)
    d = [
        [(zero, zero, -4 * y, -4 * z), (-2 * z, 2 * y, 2 * x, -2 * w), (2 * y, 2 * z, 2 * w, 2 * x)],
        [(2 * z, 2 * y, 2 * x, 2 * w), (zero, -4 * x, zero, -4 * z), (-2 * x, -2 * w, 2 * z, 2 * y)],
        [(-2 * y, 2 * z, -2 * w, 2 * x), (2 * x, 2 * w, 2 * z, 2 * y), (zero, -4 * x, -4 * y, zero)],
    ]
    return np.stack([
        np.stack([np.stack(entry, axis=-1) for entry in row], axis=-2) for row in d
    ], axis=-3)


def normalize_jacobian(q):
    """d (q/|q|) / d q, shape (..., 4, 4)."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1)[..., None, None]
    qn = q / n[..., 0]
    eye = np.eye(q.shape[-1])
    return (eye - qn[..., :, None] * qn[..., None, :]) / n


# --------------------------------------------------------------------------
# covariance and SH


def build_covariance(q, s):
    """World-space covariance ``R diag(s)^2 R^T``."""
    s = np.asarray(s, dtype=np.float64)
    if np.any(s <= 0):
        raise DegenerateInputError("scales must be positive")
    r = quat_to_rotmat(q)
    m = r * s[..., None, :]
    return m @ np.swapaxes(m, -1, -2)


def sh_basis(view_dir):
    """Degree-1 real SH basis values (..., 4) for unit directions."""
    d = np.asarray(view_dir, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    return np.stack([np.full_like(x, SH_C0), -SH_C1 * y, SH_C1 * z, -SH_C1 * x], axis=-1)


def eval_sh(sh, view_dir):
    """Raw (unclamped) RGB from degree-1 SH. ``sh`` is (..., 12), channel-major."""
    sh = np.asarray(sh, dtype=np.float64)
    basis = sh_basis(view_dir)
    return np.einsum("...ck,...k->...c", sh.reshape(sh.shape[:-1] + (3, 4)), basis)


# --------------------------------------------------------------------------
# containers


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        if self.width <= 0 or self.height <= 0:
            raise ValueError("camera width/height must be positive")
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-6:
            raise ValueError("camera rotation is not orthonormal")

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height, cx=None, cy=None):
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        return cls(fx, fy, width / 2 if cx is None else cx, height / 2 if cy is None else cy,
                   rot, -rot @ eye, width, height)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "rotation": self.rotation.tolist(), "translation": self.translation.tolist(),
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   np.array(d["rotation"], dtype=np.float64),
                   np.array(d["translation"], dtype=np.float64),
                   int(d["width"]), int(d["height"]))


def _bbox_of(positions):
    if len(positions) == 0:
        return np.zeros((2, 3))
    return np.stack([positions.min(axis=0), positions.max(axis=0)])


@dataclass
class GaussianSet:
    """Struct-of-arrays Gaussian scene. Index order is the stable identity."""

    positions: np.ndarray   # (N, 3)
    quats: np.ndarray       # (N, 4) unit, (w, x, y, z)
    scales: np.ndarray      # (N, 3) > 0
    opacities: np.ndarray   # (N,) in [0, 1]
    sh: np.ndarray          # (N, 12)
    bbox: np.ndarray = field(default=None)  # (2, 3) min/max corners, fixed at frame 0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.quats = np.asarray(self.quats, dtype=np.float64).reshape(n, 4)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(n, 3)
        self.opacities = np.asarray(self.opacities, dtype=np.float64).reshape(n)
        self.sh = np.asarray(self.sh, dtype=np.float64).reshape(n, 12)
        if self.bbox is None:
            self.bbox = _bbox_of(self.positions)
        self.bbox = np.asarray(self.bbox, dtype=np.float64).reshape(2, 3)

    def __len__(self) -> int:
        return len(self.positions)

    def validate(self) -> None:
        if len(self) == 0:
            return
        if np.abs(np.linalg.norm(self.quats, axis=1) - 1).max() > 1e-6:
            raise ValueError("quaternions must be unit length")
        if np.any(self.scales <= 0):
            raise ValueError("scales must be positive")
        if np.any((self.opacities < 0) | (self.opacities > 1)):
            raise ValueError("opacities must lie in [0, 1]")

    def copy(self) -> "GaussianSet":
        return GaussianSet(self.positions.copy(), self.quats.copy(), self.scales.copy(),
                           self.opacities.copy(), self.sh.copy(), self.bbox.copy())

    def replace(self, **changes) -> "GaussianSet":
        return replace(self, **changes)

    def subset(self, idx) -> "GaussianSet":
        idx = np.asarray(idx, dtype=np.int64)
        return GaussianSet(self.positions[idx], self.quats[idx], self.scales[idx],
                           self.opacities[idx], self.sh[idx], self.bbox.copy())

    def as_float32_exact(self) -> "GaussianSet":
        """Round every parameter to float32 precision (values kept as float64)."""
        r = lambda a: a.astype(np.float32).astype(np.float64)  # noqa: E731
        return GaussianSet(r(self.positions), r(self.quats), r(self.scales),
                           r(self.opacities), r(self.sh), self.bbox.copy())

    def bitwise_equal(self, other: "GaussianSet", idx=None) -> bool:
        sel = slice(None) if idx is None else np.asarray(idx, dtype=np.int64)
        return all(
            np.array_equal(getattr(self, f)[sel].view(np.uint64), getattr(other, f)[sel].view(np.uint64))
            for f in ("positions", "quats", "scales", "opacities", "sh")
        )

    @classmethod
    def empty(cls) -> "GaussianSet":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 12)))


@dataclass
class Splats2D:
    """Batched projection result. ``visible`` marks Gaussians in front of the near plane."""

    mean2d: np.ndarray     # (N, 2)
    cov2d: np.ndarray      # (N, 2, 2) including the blur term
    conic: np.ndarray      # (N, 2, 2) inverse of cov2d
    depth: np.ndarray      # (N,)
    color: np.ndarray      # (N, 3) raw SH color
    visible: np.ndarray    # (N,) bool
    # cached intermediates for the backward pass
    t_cam: np.ndarray
    jac: np.ndarray        # (N, 2, 3)
    cov3d: np.ndarray      # (N, 3, 3)
    view_dir: np.ndarray   # (N, 3) unit, camera center -> Gaussian
    view_dist: np.ndarray  # (N,)


def project_gaussians(gs: GaussianSet, cam: Camera) -> Splats2D:
    """EWA projection of every Gaussian into ``cam``."""
    n = len(gs)
    w = cam.rotation
    t = gs.positions @ w.T + cam.translation
    visible = t[:, 2] > NEAR_PLANE
    tz = np.where(visible, t[:, 2], 1.0)
    tx, ty = t[:, 0], t[:, 1]
    mean2d = np.stack([cam.fx * tx / tz + cam.cx, cam.fy * ty / tz + cam.cy], axis=1)
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = cam.fx / tz
    jac[:, 0, 2] = -cam.fx * tx / (tz * tz)
    jac[:, 1, 1] = cam.fy / tz
    jac[:, 1, 2] = -cam.fy * ty / (tz * tz)
    cov3d = build_covariance(gs.quats, gs.scales) if n else np.zeros((0, 3, 3))
    tm = jac @ w
    cov2d = tm @ cov3d @ np.swapaxes(tm, 1, 2)
    cov2d[:, 0, 0] += COV2D_BLUR
    cov2d[:, 1, 1] += COV2D_BLUR
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    assert np.all(det > 0), "2D covariance must be positive definite after blur"
    conic = np.empty_like(cov2d)
    conic[:, 0, 0] = cov2d[:, 1, 1] / det
    conic[:, 1, 1] = cov2d[:, 0, 0] / det
    conic[:, 0, 1] = -cov2d[:, 0, 1] / det
    conic[:, 1, 0] = -cov2d[:, 1, 0] / det
    v = gs.positions - cam.center
    dist = np.linalg.norm(v, axis=1)
    dist_safe = np.where(dist > 0, dist, 1.0)
    view_dir = v / dist_safe[:, None]
    color = eval_sh(gs.sh, view_dir)
    return Splats2D(mean2d, cov2d, conic, t[:, 2].copy(), color, visible,
                    t, jac, cov3d, view_dir, dist_safe)


def project_gaussian(g: GaussianSet, cam: Camera):
    """Project a single-Gaussian set; returns a dict splat or ``None`` when culled."""
    p = project_gaussians(g, cam)
    if not p.visible[0]:
        return None
    return {"mean2d": p.mean2d[0], "cov2d": p.cov2d[0], "depth": p.depth[0], "color": p.color[0]}
