import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_gaussians
from mgstream.config import ConfigError, PipelineConfig, load_config, parse_config
from mgstream.formats import FormatError
from mgstream.raster import render
from mgstream.stream import (DELTA_HEADER, FitConfig, FrameDelta, apply_delta, delta_from_bytes,
                             delta_size, delta_to_bytes, fit_frame0, gaussians_from_bytes,
                             gaussians_to_bytes, load_and_apply, load_gaussians, load_scene,
                             replay_stream, run_stream, save_delta, save_gaussians)
from mgstream.formats import encode_index_list
from mgstream.trainer import loss_color

seeds = st.integers(0, 2 ** 32 - 1)


def _random_delta(rng, n_total, frame=1):
    g_m = np.sort(rng.choice(n_total, size=int(rng.integers(0, n_total + 1)), replace=False))
    g_new = np.sort(rng.choice(g_m, size=int(rng.integers(0, len(g_m) + 1)), replace=False)) if len(g_m) else []
    return FrameDelta(frame, n_total, g_m, rng.normal(0, 0.1, (len(g_m), 3)),
                      rng.normal(0, 0.1, (len(g_m), 4)), g_new, rng.normal(0, 0.1, (len(g_new), 12)))


# --------------------------------------------------------------------------
# Gaussian files


@settings(max_examples=25)
@given(seeds, st.integers(0, 30))
def test_gaussian_file_round_trip(seed, n):
    gs = random_gaussians(np.random.default_rng(seed), n).as_float32_exact()
    buf = gaussians_to_bytes(gs)
    assert len(buf) == 16 + 92 * n
    assert gaussians_from_bytes(buf).bitwise_equal(gs)


def test_gaussian_file_errors(tmp_path, rng):
    gs = random_gaussians(rng, 4)
    buf = bytearray(gaussians_to_bytes(gs))
    with pytest.raises(FormatError):
        gaussians_from_bytes(bytes(buf[:-8]))
    bad_count = bytearray(buf)
    bad_count[8] += 1
    with pytest.raises(FormatError):
        gaussians_from_bytes(bytes(bad_count))
    flipped = bytearray(buf)
    flipped[40] ^= 0xFF
    with pytest.raises(FormatError):
        gaussians_from_bytes(bytes(flipped))
    with pytest.raises(FormatError):
        gaussians_from_bytes(b"MGSDLT1\x00" + bytes(buf[8:]))
    save_gaussians(gs, tmp_path / "g.mgs")
    assert load_gaussians(tmp_path / "g.mgs").bitwise_equal(gs.as_float32_exact())


# --------------------------------------------------------------------------
# deltas


def test_empty_delta_is_identity(tmp_path, rng):
    gs = random_gaussians(rng, 12).as_float32_exact()
    size = save_delta(FrameDelta.empty(3, 12), tmp_path / "d.mgd")
    assert size == DELTA_HEADER <= 64
    assert load_and_apply(gs, tmp_path / "d.mgd").bitwise_equal(gs)


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_delta_round_trip_and_replay_exact(seed):
    rng = np.random.default_rng(seed)
    gs = random_gaussians(rng, 25).as_float32_exact()
    delta = _random_delta(rng, 25)
    buf = delta_to_bytes(delta)
    back = delta_from_bytes(buf)
    assert np.array_equal(back.g_m, delta.g_m) and np.array_equal(back.g_new, delta.g_new)
    assert apply_delta(gs, back).bitwise_equal(apply_delta(gs, delta))
    idx = len(encode_index_list(delta.g_m)) + len(encode_index_list(delta.g_new))
    assert len(buf) == delta_size(len(delta.g_m), len(delta.g_new), idx)
    untouched = np.setdiff1d(np.arange(25), delta.g_m)
    assert apply_delta(gs, delta).bitwise_equal(gs, untouched)


def test_delta_corruption_detected(rng):
    delta = _random_delta(np.random.default_rng(4), 30)
    buf = bytearray(delta_to_bytes(delta))
    buf[-1] ^= 0x01
    with pytest.raises(FormatError, match="checksum"):
        delta_from_bytes(bytes(buf))
    with pytest.raises(FormatError):
        delta_from_bytes(bytes(buf[:20]))


def test_delta_subset_and_range_rules(rng):
    with pytest.raises(FormatError):
        delta_to_bytes(FrameDelta(1, 10, [1, 2], np.zeros((2, 3)), np.zeros((2, 4)), [3],
                                  np.zeros((1, 12))))
    with pytest.raises(FormatError):
        FrameDelta(1, 10, [10], np.zeros((1, 3)), np.zeros((1, 4)), [], np.zeros((0, 12))).validate()
    gs = random_gaussians(rng, 5)
    with pytest.raises(FormatError):
        apply_delta(gs, FrameDelta.empty(1, 6))
    with pytest.raises(FormatError):
        apply_delta(gs, FrameDelta(1, 5, [0], np.zeros((1, 3)), [[-1.0, 0, 0, 0]], [], np.zeros((0, 12))))


# --------------------------------------------------------------------------
# config


def test_config_defaults_and_round_trip(tmp_path):
    cfg = PipelineConfig()
    assert (cfg.flow_tau, cfg.diff_threshold, cfg.morph_kernel, cfg.eps, cfg.min_samples) == (1.0, 10.0, 20, 2.0, 10)
    assert (cfg.top_n, cfg.deform_iters, cfg.optim_iters, cfg.lam, cfg.attention_percentile) == (1, 100, 100, 0.2, 99.0)
    assert parse_config(cfg.to_text()) == cfg
    path = tmp_path / "c.txt"
    path.write_text("# comment\neps = 5\nuse_clustering = no\ntop_n = 3  # inline\n")
    loaded = load_config(path)
    assert loaded.eps == 5.0 and loaded.use_clustering is False and loaded.top_n == 3


@pytest.mark.parametrize("text", ["bogus = 1", "eps = abc", "top_n = 9", "use_clustering = maybe",
                                  "flow = magic", "eps", "lam = 2"])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.txt")


# --------------------------------------------------------------------------
# stream on the static scene (fixpoint)


def test_static_stream_is_a_fixpoint(scene_dirs):
    root = scene_dirs("static")
    out = root / "run"
    (out / "deltas").mkdir(parents=True)
    (out / "deltas" / "frame_0099.mgd").write_bytes(b"stale")
    cfg = PipelineConfig()
    report = run_stream(root, cfg, out)
    scene = load_scene(root)
    assert [r["g_m"] for r in report.rows] == [0] * (scene.n_frames - 1)
    assert all(b == DELTA_HEADER for b in report.delta_bytes)
    assert report.e_warp == 0.0
    assert sorted(p.name for p in (out / "deltas").iterdir()) == [f"frame_{t:04d}.mgd" for t in range(1, 4)]
    sets = replay_stream(root, cfg, out)
    cam = scene.cameras[scene.heldout]
    first = render(sets[0], cam).rgb
    assert all(np.array_equal(render(s, cam).rgb, first) for s in sets[1:])
    data = json.loads((out / "report.json").read_text())
    assert data["storage"]["total_including_initial"] == data["storage"]["total_excluding_initial"] + report.frame0_bytes
    assert (out / "report.csv").read_text().startswith("frame,psnr_full,psnr_dyn,epair_prev,epair_zero,g_m,g_new,bytes")
    assert (out / "timings.json").exists() and (out / "logs" / "frame_0001.json").exists()


def test_missing_flow_files_is_format_error(scene_dirs, tmp_path):
    import shutil
    root = tmp_path / "copy"
    shutil.copytree(scene_dirs("static"), root)
    shutil.rmtree(root / "flows")
    with pytest.raises(FormatError):
        run_stream(root, PipelineConfig(frames=2))


# --------------------------------------------------------------------------
# frame-0 fit


def test_fit_zero_iterations_returns_init(scene_dirs):
    scene = load_scene(scene_dirs("static"))
    frames = [scene.image(v, 0) for v in scene.train_views]
    cams = [scene.cameras[v] for v in scene.train_views]
    a, losses = fit_frame0(frames, cams, 0, FitConfig(n_gaussians=20, seed=4))
    b, _ = fit_frame0(frames, cams, 0, FitConfig(n_gaussians=20, seed=4))
    assert losses == [] and a.bitwise_equal(b) and len(a) == 20
    with pytest.raises(ValueError):
        fit_frame0(frames[:1], cams[:1], 5)


def test_fit_is_deterministic(scene_dirs):
    scene = load_scene(scene_dirs("static"))
    frames = [scene.image(v, 0) for v in scene.train_views]
    cams = [scene.cameras[v] for v in scene.train_views]
    cfg = FitConfig(n_gaussians=15, seed=2)
    a, la = fit_frame0(frames, cams, 8, cfg)
    b, lb = fit_frame0(frames, cams, 8, cfg)
    assert la == lb and a.bitwise_equal(b)


def test_fit_static_scene_quality(scene_dirs):
    """2000 iterations with 200 Gaussians: >= 10x loss drop and >= 25 dB held out."""
    from mgstream.metrics import psnr
    from mgstream.stream import init_frame0
    scene = load_scene(scene_dirs("static"))
    frames = [scene.image(v, 0) for v in scene.train_views]
    cams = [scene.cameras[v] for v in scene.train_views]
    cfg = FitConfig()
    gs, _ = fit_frame0(frames, cams, 2000, cfg)
    init = init_frame0(cams, cfg.n_gaussians, cfg.seed)
    before = np.mean([loss_color(render(init, c).rgb, f)[0] for c, f in zip(cams, frames)])
    after = np.mean([loss_color(render(gs, c).rgb, f)[0] for c, f in zip(cams, frames)])
    h = scene.heldout
    score = psnr(render(gs, scene.cameras[h]).rgb, scene.image(h, 0))
    print(f"fit: loss {before:.4f} -> {after:.4f} ({before / after:.1f}x), held-out {score:.2f} dB")
    assert before / after >= 10.0
    assert score >= 25.0
