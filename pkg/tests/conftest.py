import numpy as np
import pytest

from mgstream.config import PipelineConfig
from mgstream.scenesim import build_scene, mover_variant, standard_scenes
from mgstream.stream import export_scene, run_stream


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --------------------------------------------------------------------------
# shared simulator scenes and stream runs (expensive, built once per session)


@pytest.fixture(scope="session")
def specs():
    s = standard_scenes()
    s["mover-x2"] = mover_variant(2)
    return s


@pytest.fixture(scope="session")
def gt_scenes(specs):
    cache = {}

    def get(name):
        if name not in cache:
            cache[name] = build_scene(specs[name])
        return cache[name]
    return get


@pytest.fixture(scope="session")
def scene_dirs(gt_scenes, tmp_path_factory):
    cache = {}

    def get(name):
        if name not in cache:
            root = tmp_path_factory.mktemp(name.replace("-", "_"))
            export_scene(gt_scenes(name), root)
            cache[name] = root
        return cache[name]
    return get


@pytest.fixture(scope="session")
def mover_stream(scene_dirs):
    """Full 10-frame stream on the "mover" scene with default settings."""
    root = scene_dirs("mover")
    cfg = PipelineConfig()
    return root, cfg, run_stream(root, cfg)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
