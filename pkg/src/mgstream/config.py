"""Pipeline configuration: a dataclass loaded from flat ``key = value`` text."""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from . import flowmotion
from .motionselect import DBSCAN_EPS, DBSCAN_MIN_SAMPLES
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    flow_tau: float = flowmotion.FLOW_TAU
    diff_threshold: float = flowmotion.DIFF_THRESHOLD
    morph_kernel: int = flowmotion.MORPH_KERNEL
    eps: float = DBSCAN_EPS
    min_samples: int = DBSCAN_MIN_SAMPLES
    use_clustering: bool = True
    top_n: int = 1
    deform_iters: int = 100
    optim_iters: int = 100
    lam: float = 0.2
    attention_percentile: float = 99.0
    lr_grid: float = 2e-2
    lr_mlp: float = 2e-3
    seed: int = 0
    flow: str = "gt"              # gt: precomputed flow files | estimate: built-in estimator
    frames: int = 0               # number of frames to stream (0 = all)
    init: str = "gaussians/frame0.mgs"   # frame-0 Gaussians, relative to the scene dir
    output: str = "stream"        # output dir, relative to the scene dir

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        checks = [
            (self.flow_tau > 0, "flow_tau must be > 0"),
            (self.diff_threshold >= 0, "diff_threshold must be >= 0"),
            (self.morph_kernel >= 1, "morph_kernel must be >= 1"),
            (self.eps > 0, "eps must be > 0"),
            (self.min_samples >= 1, "min_samples must be >= 1"),
            (1 <= self.top_n <= 5, "top_n must lie in 1..5"),
            (self.deform_iters >= 0 and self.optim_iters >= 0, "iteration counts must be >= 0"),
            (0.0 <= self.lam <= 1.0, "lam must lie in [0, 1]"),
            (0.0 < self.attention_percentile < 100.0, "attention_percentile must lie in (0, 100)"),
            (self.lr_grid > 0 and self.lr_mlp > 0, "learning rates must be > 0"),
            (self.flow in ("gt", "estimate"), "flow must be 'gt' or 'estimate'"),
            (self.frames >= 0, "frames must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            deform_iters=self.deform_iters, optim_iters=self.optim_iters, lam=self.lam,
            attention_percentile=self.attention_percentile, seed=self.seed,
            lr_grid=self.lr_grid, lr_mlp=self.lr_mlp, top_n=self.top_n,
            flow_tau=self.flow_tau, diff_threshold=self.diff_threshold,
            morph_kernel=self.morph_kernel, eps=self.eps, min_samples=self.min_samples,
            use_clustering=self.use_clustering,
        )

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _coerce(name: str, kind, raw: str):
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind.__name__}") from None


_TYPES = {"float": float, "int": int, "bool": bool, "str": str}


def parse_config(text: str) -> PipelineConfig:
    """Parse ``key = value`` lines (``#`` comments allowed); unknown keys are errors."""
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",),
                                       inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string("[config]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    known = {f.name: _TYPES[f.type] for f in fields(PipelineConfig)}
    values = {}
    for key, raw in parser["config"].items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, known[key], raw.strip())
    return PipelineConfig(**values)


def load_config(path) -> PipelineConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)
