"""Hash-grid encoder + small MLP mapping positions to per-Gaussian offsets.

Two instances drive a frame: a deformation map with 7 outputs
(dx, dy, dz, dqw, dqx, dqy, dqz) and a color map with 12 SH offsets.
Parameters are stored in ``dtype`` (float32 by default, matching the on-disk
format); all arithmetic runs in float64.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .formats import FormatError, atomic_write, check_magic, magic_bytes
from .gsplat import (DegenerateInputError, GaussianSet, normalize_jacobian, quat_left_matrix,
                     quat_multiply)

HASH_PRIMES = (1, 2654435761, 805459861)
PARAM_NAMES = ("table", "w1", "b1", "w2", "b2", "w3", "b3")


class TrainingDivergenceError(RuntimeError):
    """Non-finite loss or gradient during optimization."""


@dataclass(frozen=True)
class HashGridConfig:
    levels: int = 16
    base_resolution: int = 16
    finest_resolution: int = 512
    table_size: int = 2 ** 15
    features_per_level: int = 4

    def __post_init__(self):
        if self.levels < 1 or self.finest_resolution < self.base_resolution:
            raise ValueError("invalid hash grid config")

    @property
    def growth(self) -> float:
        if self.levels == 1:
            return 1.0
        return float(np.exp(np.log(self.finest_resolution / self.base_resolution) / (self.levels - 1)))

    @property
    def resolutions(self) -> np.ndarray:
        lv = np.arange(self.levels)
        return np.floor(self.base_resolution * self.growth ** lv + 1e-9).astype(np.int64)

    @property
    def output_dim(self) -> int:
        return self.levels * self.features_per_level


@dataclass(frozen=True)
class MlpConfig:
    hidden: int = 64
    output: int = 7


@dataclass
class AdamConfig:
    lr_grid: float = 2e-2
    lr_mlp: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15


def hash_corners(cfg: HashGridConfig, unit_pos):
    """Hashed corner rows (B, L, 8) and trilinear weights (B, L, 8) for positions in [0,1]^3."""
    res = cfg.resolutions.astype(np.float64)
    scaled = unit_pos[:, None, :] * res[None, :, None]          # (B, L, 3)
    base = np.floor(scaled)
    frac = scaled - base
    base = base.astype(np.uint64)
    rows = np.empty(scaled.shape[:2] + (8,), dtype=np.int64)
    weights = np.empty(scaled.shape[:2] + (8,))
    mask = np.uint64(cfg.table_size - 1) if cfg.table_size & (cfg.table_size - 1) == 0 else None
    primes = [np.uint64(p) for p in HASH_PRIMES]
    for c in range(8):
        bits = [(c >> k) & 1 for k in range(3)]
        h = np.zeros(scaled.shape[:2], dtype=np.uint64)
        w = np.ones(scaled.shape[:2])
        for k in range(3):
            coord = base[..., k] + np.uint64(bits[k])
            h ^= coord * primes[k]
            w = w * (frac[..., k] if bits[k] else 1.0 - frac[..., k])
        rows[..., c] = (h & mask if mask is not None else h % np.uint64(cfg.table_size)).astype(np.int64)
        weights[..., c] = w
    return rows, weights


@dataclass
class NeuralMap:
    grid: HashGridConfig
    mlp: MlpConfig
    bbox: np.ndarray                     # (2, 3) normalization box (already padded)
    params: dict
    adam: AdamConfig = field(default_factory=AdamConfig)
    m: dict = None
    v: dict = None
    step: int = 0
    touched: np.ndarray = None           # (L, T) table rows that ever received gradient

    def __post_init__(self):
        if self.m is None:
            self.m = {k: np.zeros_like(p) for k, p in self.params.items()}
        if self.v is None:
            self.v = {k: np.zeros_like(p) for k, p in self.params.items()}
        if self.touched is None:
            self.touched = np.zeros(self.params["table"].shape[:2], dtype=bool)
            self.touched |= np.any(self.v["table"] != 0, axis=2) | np.any(self.m["table"] != 0, axis=2)

    @property
    def dtype(self):
        return self.params["table"].dtype

    @property
    def output_dim(self) -> int:
        return self.mlp.output


def new_map(output_dim: int, bbox, seed: int = 0, grid: HashGridConfig | None = None,
            hidden: int = 64, adam: AdamConfig | None = None, dtype=np.float32,
            pad: float = 0.05) -> NeuralMap:
    """Fresh map: small uniform table, He hidden layers, zero output layer."""
    grid = grid or HashGridConfig()
    rng = np.random.default_rng(seed)
    bbox = np.asarray(bbox, dtype=np.float64).reshape(2, 3)
    span = np.maximum(bbox[1] - bbox[0], 1e-6)
    padded = np.stack([bbox[0] - pad * span, bbox[1] + pad * span])
    d_in = grid.output_dim
    params = {
        "table": rng.uniform(-1e-4, 1e-4, (grid.levels, grid.table_size, grid.features_per_level)),
        "w1": rng.normal(0.0, np.sqrt(2.0 / d_in), (d_in, hidden)),
        "b1": np.zeros(hidden),
        "w2": rng.normal(0.0, np.sqrt(2.0 / hidden), (hidden, hidden)),
        "b2": np.zeros(hidden),
        "w3": np.zeros((hidden, output_dim)),
        "b3": np.zeros(output_dim),
    }
    params = {k: v.astype(dtype) for k, v in params.items()}
    return NeuralMap(grid, MlpConfig(hidden, output_dim), padded, params, adam or AdamConfig())


def normalize_positions(nmap: NeuralMap, positions) -> np.ndarray:
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    lo, hi = nmap.bbox
    return np.clip((pos - lo) / (hi - lo), 0.0, 1.0)


def hash_encode(nmap: NeuralMap, positions, return_cache: bool = False):
    """(B, levels * features) trilinearly interpolated hash features."""
    unit = normalize_positions(nmap, positions)
    rows, weights = hash_corners(nmap.grid, unit)
    table = nmap.params["table"]
    lv = np.arange(nmap.grid.levels)[None, :, None]
    corner = table[lv, rows].astype(np.float64)                    # (B, L, 8, F)
    feats = np.einsum("blc,blcf->blf", weights, corner)
    out = feats.reshape(len(unit), -1)
    if return_cache:
        return out, (rows, weights)
    return out


def _dense(x, w, b):
    # einsum's own loop keeps each row's sum order independent of the batch (BLAS does not)
    return np.einsum("bi,ih->bh", x, w) + b


def map_forward(nmap: NeuralMap, positions, return_cache: bool = False):
    enc, (rows, weights) = hash_encode(nmap, positions, return_cache=True)
    p = {k: v.astype(np.float64) for k, v in nmap.params.items() if k != "table"}
    z1 = _dense(enc, p["w1"], p["b1"])
    h1 = np.maximum(z1, 0.0)
    z2 = _dense(h1, p["w2"], p["b2"])
    h2 = np.maximum(z2, 0.0)
    out = _dense(h2, p["w3"], p["b3"])
    if return_cache:
        return out, (enc, rows, weights, z1, h1, z2, h2, p)
    return out


def map_gradients(nmap: NeuralMap, positions, dl_doutput) -> dict:
    """Parameter gradients of ``sum(dl_doutput * map_forward(positions))``.

    The table gradient is returned sparsely as ``("table_rows", "table_grad")``:
    flat row ids ``level * table_size + row`` and their (R, F) gradients.
    """
    out, (enc, rows, weights, z1, h1, z2, h2, p) = map_forward(nmap, positions, return_cache=True)
    g = np.asarray(dl_doutput, dtype=np.float64).reshape(out.shape)
    grads = {"w3": h2.T @ g, "b3": g.sum(axis=0)}
    g_h2 = g @ p["w3"].T
    g_z2 = g_h2 * (z2 > 0)
    grads["w2"] = h1.T @ g_z2
    grads["b2"] = g_z2.sum(axis=0)
    g_h1 = g_z2 @ p["w2"].T
    g_z1 = g_h1 * (z1 > 0)
    grads["w1"] = enc.T @ g_z1
    grads["b1"] = g_z1.sum(axis=0)
    g_enc = (g_z1 @ p["w1"].T).reshape(len(enc), nmap.grid.levels, nmap.grid.features_per_level)
    # scatter corner contributions, summed per unique row
    t = nmap.grid.table_size
    flat = (rows + np.arange(nmap.grid.levels)[None, :, None] * t).reshape(-1)
    contrib = (weights[..., None] * g_enc[:, :, None, :]).reshape(-1, nmap.grid.features_per_level)
    uniq, inv = np.unique(flat, return_inverse=True)
    tg = np.zeros((len(uniq), nmap.grid.features_per_level))
    for f in range(nmap.grid.features_per_level):
        tg[:, f] = np.bincount(inv, weights=contrib[:, f], minlength=len(uniq))
    grads["table_rows"] = uniq
    grads["table_grad"] = tg
    return grads


def dense_table_grad(nmap: NeuralMap, grads: dict) -> np.ndarray:
    out = np.zeros(nmap.params["table"].shape)
    flat = out.reshape(-1, out.shape[-1])
    flat[grads["table_rows"]] = grads["table_grad"]
    return out


def _adam_update(param, m, v, g, lr, cfg: AdamConfig, step: int):
    m64 = cfg.beta1 * m.astype(np.float64) + (1 - cfg.beta1) * g
    v64 = cfg.beta2 * v.astype(np.float64) + (1 - cfg.beta2) * g * g
    m_hat = m64 / (1 - cfg.beta1 ** step)
    v_hat = v64 / (1 - cfg.beta2 ** step)
    new = param.astype(np.float64) - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return new.astype(param.dtype), m64.astype(m.dtype), v64.astype(v.dtype)


def apply_gradients(nmap: NeuralMap, grads: dict, lr_grid: float | None = None,
                    lr_mlp: float | None = None) -> NeuralMap:
    """One adaptive-moment step in place; returns ``nmap``.

    Table rows that have never received gradient have zero moments, so their
    update is exactly zero; only rows touched so far are visited.
    """
    lr_grid = nmap.adam.lr_grid if lr_grid is None else lr_grid
    lr_mlp = nmap.adam.lr_mlp if lr_mlp is None else lr_mlp
    for name in ("w1", "b1", "w2", "b2", "w3", "b3", "table_grad"):
        if not np.all(np.isfinite(grads[name])):
            block = "table" if name == "table_grad" else name
            raise TrainingDivergenceError(f"non-finite gradient in parameter block '{block}'")
    step = nmap.step + 1
    for name in ("w1", "b1", "w2", "b2", "w3", "b3"):
        nmap.params[name], nmap.m[name], nmap.v[name] = _adam_update(
            nmap.params[name], nmap.m[name], nmap.v[name], grads[name], lr_mlp, nmap.adam, step)
    rows = grads["table_rows"]
    touched = nmap.touched.reshape(-1)
    touched[rows] = True
    live = np.flatnonzero(touched)
    g_live = np.zeros((len(live), nmap.grid.features_per_level))
    g_live[np.searchsorted(live, rows)] = grads["table_grad"]
    flat_p = nmap.params["table"].reshape(-1, nmap.grid.features_per_level)
    flat_m = nmap.m["table"].reshape(-1, nmap.grid.features_per_level)
    flat_v = nmap.v["table"].reshape(-1, nmap.grid.features_per_level)
    flat_p[live], flat_m[live], flat_v[live] = _adam_update(
        flat_p[live], flat_m[live], flat_v[live], g_live, lr_grid, nmap.adam, step)
    nmap.step = step
    return nmap


def map_backward_and_step(nmap: NeuralMap, positions, dl_doutput, lr_grid=None, lr_mlp=None) -> NeuralMap:
    return apply_gradients(nmap, map_gradients(nmap, positions, dl_doutput), lr_grid, lr_mlp)


# --------------------------------------------------------------------------
# applying offsets to a Gaussian set


class DegenerateRotationError(DegenerateInputError):
    pass


def _shifted_dq(dq):
    q = np.asarray(dq, dtype=np.float64).reshape(-1, 4).copy()
    q[:, 0] += 1.0
    norm = np.linalg.norm(q, axis=1)
    if np.any(norm < 1e-8):
        raise DegenerateRotationError("rotation offset collapses to a zero quaternion")
    return q, norm


def apply_deformation(gs: GaussianSet, g_m, du, dq) -> GaussianSet:
    """Rigid per-Gaussian update of the ``g_m`` members; everything else untouched."""
    g_m = np.asarray(g_m, dtype=np.int64)
    du = np.asarray(du, dtype=np.float64).reshape(-1, 3)
    if len(du) != len(g_m) or len(np.asarray(dq).reshape(-1, 4)) != len(g_m):
        raise ValueError("need one offset per motion-related Gaussian")
    out = gs.copy()
    if len(g_m) == 0:
        return out
    out.positions[g_m] = gs.positions[g_m] + du
    shifted, norm = _shifted_dq(dq)
    unit = shifted / norm[:, None]
    rotated = quat_multiply(gs.quats[g_m], unit)
    rotated /= np.linalg.norm(rotated, axis=1, keepdims=True)
    same = np.all(np.asarray(dq).reshape(-1, 4) == 0.0, axis=1)
    out.quats[g_m] = np.where(same[:, None], gs.quats[g_m], rotated)
    return out


def deformation_backward(gs_prev: GaussianSet, g_m, dq, g_u, g_q):
    """Chain rasterizer gradients on the deformed set back to the raw offsets."""
    g_m = np.asarray(g_m, dtype=np.int64)
    shifted, norm = _shifted_dq(dq)
    unit = shifted / norm[:, None]
    prod = quat_multiply(gs_prev.quats[g_m], unit)
    g_prod = np.einsum("nij,ni->nj", normalize_jacobian(prod), g_q)
    g_unit = np.einsum("nij,ni->nj", quat_left_matrix(gs_prev.quats[g_m]), g_prod)
    g_dq = np.einsum("nij,ni->nj", normalize_jacobian(shifted), g_unit)
    return np.asarray(g_u, dtype=np.float64), g_dq


def apply_sh_offsets(gs: GaussianSet, g_new, dsh) -> GaussianSet:
    g_new = np.asarray(g_new, dtype=np.int64)
    dsh = np.asarray(dsh, dtype=np.float64).reshape(-1, 12)
    if len(dsh) != len(g_new):
        raise ValueError("need one SH offset per selected Gaussian")
    out = gs.copy()
    if len(g_new):
        out.sh[g_new] = gs.sh[g_new] + dsh
    return out


# --------------------------------------------------------------------------
# persistence (MGSNTC1)

_HEADER = struct.Struct("<8I6dI")


def map_to_bytes(nmap: NeuralMap) -> bytes:
    g = nmap.grid
    header = _HEADER.pack(g.levels, g.base_resolution, g.finest_resolution, g.table_size,
                          g.features_per_level, nmap.mlp.hidden, nmap.mlp.output, nmap.step,
                          *nmap.bbox.reshape(-1).tolist(), 1 if nmap.dtype == np.float64 else 0)
    adam = struct.pack("<5d", nmap.adam.lr_grid, nmap.adam.lr_mlp, nmap.adam.beta1,
                       nmap.adam.beta2, nmap.adam.eps)
    body = bytearray()
    store = "<f8" if nmap.dtype == np.float64 else "<f4"
    for store_dict in (nmap.params, nmap.m, nmap.v):
        for name in PARAM_NAMES:
            body += np.ascontiguousarray(store_dict[name], dtype=store).tobytes()
    return magic_bytes("MGSNTC1") + header + adam + bytes(body)


def map_from_bytes(buf: bytes) -> NeuralMap:
    check_magic(buf, "MGSNTC1")
    pos = 8
    if len(buf) < pos + _HEADER.size + 40:
        raise FormatError("truncated MGSNTC1 header", len(buf))
    vals = _HEADER.unpack_from(buf, pos)
    pos += _HEADER.size
    levels, base, finest, tsize, feats, hidden, out_dim, step = vals[:8]
    bbox = np.array(vals[8:14]).reshape(2, 3)
    wide = vals[14] == 1
    adam = AdamConfig(*struct.unpack_from("<5d", buf, pos))
    pos += 40
    grid = HashGridConfig(levels, base, finest, tsize, feats)
    d_in = grid.output_dim
    shapes = {"table": (levels, tsize, feats), "w1": (d_in, hidden), "b1": (hidden,),
              "w2": (hidden, hidden), "b2": (hidden,), "w3": (hidden, out_dim), "b3": (out_dim,)}
    store = np.dtype("<f8" if wide else "<f4")
    dtype = np.float64 if wide else np.float32
    dicts = []
    for _ in range(3):
        d = {}
        for name in PARAM_NAMES:
            count = int(np.prod(shapes[name]))
            nbytes = count * store.itemsize
            if pos + nbytes > len(buf):
                raise FormatError(f"truncated MGSNTC1 block '{name}'", len(buf))
            d[name] = np.frombuffer(buf, dtype=store, count=count, offset=pos).reshape(shapes[name]).astype(dtype)
            pos += nbytes
        dicts.append(d)
    if pos != len(buf):
        raise FormatError("trailing bytes after MGSNTC1 payload", pos)
    return NeuralMap(grid, MlpConfig(hidden, out_dim), bbox, dicts[0], adam, dicts[1], dicts[2], step)


def save_map(nmap: NeuralMap, path) -> None:
    atomic_write(path, map_to_bytes(nmap))


def load_map(path) -> NeuralMap:
    return map_from_bytes(Path(path).read_bytes())
