"""Run configuration: a nested YAML/JSON schema with full defaults.

Layout::

    seed: 0
    output_dir: runs/demo
    space:     {num_scales, conv_ops, kernel_sizes, se_ratios, skips, channels,
                repeats, input_resolution, block_budget, expansion}
    objective: {preset, target, alpha}
    search:    {population, children, max_iterations, patience, tabu_tenure, probe_size}
    task:      {samples, max_spheres, val_fraction, seed}
    train:     {epochs, batch_size, learning_rate, beta1, beta2, eps,
                decay_start, decay_every, decay_fraction}

``seed`` and ``output_dir`` are required; everything else has a default.
``space.block_budget`` takes an integer, ``null`` (no budget) or ``"auto"``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Optional, Union

import yaml

from .evaluator import TrainConfig
from .genome import ConvOp, InvalidConfigError, SearchSpaceConfig, Skip, suggest_block_budget
from .search import Objective, SearchConfig

# Named (target, alpha) presets sized for million-parameter models.  At desk
# scale every genome is far below these targets, so they only fix alpha.
PRESETS = {
    "lidnas-n": (2_000_000, 0.6),
    "lidnas-k": (1_500_000, 0.55),
    "lidnas-s": (4_500_000, 0.57),
}
DEFAULT_TARGET = 40_000
DEFAULT_ALPHA = 0.6


class ConfigError(ValueError):
    """Bad configuration; ``path`` names the offending key."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class SpaceSettings:
    num_scales: int = 3
    conv_ops: tuple = tuple(op.value for op in ConvOp)
    kernel_sizes: tuple = (3, 5)
    se_ratios: tuple = (0.0, 0.25)
    skips: tuple = tuple(s.value for s in Skip)
    channels: tuple = (8, 16, 24, 32)
    repeats: tuple = (1, 2, 3)
    input_resolution: tuple = (32, 32, 3)
    block_budget: Union[int, str, None] = "auto"
    expansion: int = 3

    def build(self) -> SearchSpaceConfig:
        """The search-space config with ``"auto"`` budget resolved."""
        base = SearchSpaceConfig(
            num_scales=self.num_scales,
            conv_ops=self.conv_ops,
            kernel_sizes=self.kernel_sizes,
            se_ratios=self.se_ratios,
            skips=self.skips,
            channels=self.channels,
            repeats=self.repeats,
            input_resolution=self.input_resolution,
            block_budget=None,
            expansion=self.expansion,
        )
        budget = suggest_block_budget(base) if self.block_budget == "auto" else self.block_budget
        return dataclasses.replace(base, block_budget=budget)


@dataclass(frozen=True)
class ObjectiveSettings:
    preset: Optional[str] = None
    target: int = DEFAULT_TARGET
    alpha: float = DEFAULT_ALPHA

    def build(self) -> Objective:
        return Objective(self.target, self.alpha)


@dataclass(frozen=True)
class TaskSettings:
    samples: int = 160
    max_spheres: int = 3
    val_fraction: float = 0.2
    seed: int = 7


@dataclass(frozen=True)
class RunConfig:
    seed: int
    output_dir: str
    space: SpaceSettings = field(default_factory=SpaceSettings)
    objective: ObjectiveSettings = field(default_factory=ObjectiveSettings)
    search: SearchConfig = field(default_factory=SearchConfig)
    task: TaskSettings = field(default_factory=TaskSettings)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


SECTIONS = {
    "space": SpaceSettings,
    "objective": ObjectiveSettings,
    "search": SearchConfig,
    "task": TaskSettings,
    "train": TrainConfig,
}
REQUIRED = ("seed", "output_dir")


def toy_settings() -> dict:
    """Overrides for the enumerable 243-genome toy space (single scale,
    one operation, three widths per block)."""
    return {
        "space": {
            "num_scales": 1,
            "conv_ops": ["Vanilla2D"],
            "kernel_sizes": [3],
            "se_ratios": [0.0],
            "skips": ["None"],
            "channels": [4, 8, 16],
            "repeats": [1],
            "input_resolution": [8, 8, 3],
            "block_budget": None,
        },
        "objective": {"target": 3000, "alpha": 0.6},
        "search": {"population": 243, "max_iterations": 100, "patience": 10},
        "task": {"samples": 64},
        "train": {"learning_rate": 0.005},
    }


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def merge(base: dict, override: dict) -> dict:
    """Recursive dict merge; ``override`` wins."""
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def _coerce(path: str, value: Any, default: Any):
    """Check ``value`` against the type of the field's default."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected bool, got {type(value).__name__}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected int, got {type(value).__name__}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected number, got {type(value).__name__}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or not value:
            raise ConfigError(path, "expected a non-empty list")
        inner = default[0]
        return tuple(_coerce(f"{path}[{i}]", v, inner) for i, v in enumerate(value))
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(path, f"expected string, got {type(value).__name__}")
        return value
    return value


def _section(name: str, cls, data: Any):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(name, "expected a mapping")
    defaults = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown key")
    values = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        path = f"{name}.{f.name}"
        value, default = data[f.name], getattr(defaults, f.name)
        if name == "space" and f.name == "block_budget":
            if not (value is None or value == "auto" or (isinstance(value, int) and not isinstance(value, bool))):
                raise ConfigError(path, "expected an int, null or 'auto'")
        elif name == "objective" and f.name == "preset":
            if value is not None and value not in PRESETS:
                raise ConfigError(path, f"unknown preset {value!r}; choose from {sorted(PRESETS)}")
        elif name == "space" and f.name == "se_ratios":
            value = _coerce(path, value, (0.0,))
        else:
            value = _coerce(path, value, default)
        values[f.name] = value
    if name == "objective" and values.get("preset"):
        target, alpha = PRESETS[values["preset"]]
        values.setdefault("target", target)
        values.setdefault("alpha", alpha)
    return cls(**values)


def _check(cfg: RunConfig) -> None:
    if not 0.0 <= cfg.objective.alpha <= 1.0:
        raise ConfigError("objective.alpha", f"must lie in [0, 1], got {cfg.objective.alpha}")
    if cfg.objective.target <= 0:
        raise ConfigError("objective.target", f"must be > 0, got {cfg.objective.target}")
    s = cfg.search
    for key in ("population", "children", "tabu_tenure", "probe_size", "patience"):
        if getattr(s, key) < 1:
            raise ConfigError(f"search.{key}", "must be >= 1")
    if s.max_iterations < 0:
        raise ConfigError("search.max_iterations", "must be >= 0")
    t = cfg.task
    if t.samples < 2:
        raise ConfigError("task.samples", "must be >= 2")
    if not 0.0 < t.val_fraction < 1.0:
        raise ConfigError("task.val_fraction", "must lie in (0, 1)")
    if t.max_spheres < 0:
        raise ConfigError("task.max_spheres", "must be >= 0")
    if isinstance(cfg.space.block_budget, int) and cfg.space.block_budget < 1:
        raise ConfigError("space.block_budget", "must be >= 1")
    try:
        cfg.train.check()
    except ValueError as err:
        raise ConfigError("train", str(err)) from None
    try:
        cfg.space.build().check()
    except (InvalidConfigError, ValueError) as err:
        raise ConfigError("space", str(err)) from None


def config_from_dict(data: Any) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>", "expected a mapping at the top level")
    for key in data:
        if key not in SECTIONS and key not in REQUIRED:
            raise ConfigError(key, "unknown key")
    for key in REQUIRED:
        if key not in data:
            raise ConfigError(key, "missing required key")
    seed = data["seed"]
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed", "expected a non-negative int")
    if not isinstance(data["output_dir"], str) or not data["output_dir"]:
        raise ConfigError("output_dir", "expected a non-empty string")
    sections = {name: _section(name, cls, data.get(name)) for name, cls in SECTIONS.items()}
    cfg = RunConfig(seed=seed, output_dir=data["output_dir"], **sections)
    _check(cfg)
    return cfg


def parse_config(text: str) -> RunConfig:
    """Parse YAML (JSON is a subset) into a fully defaulted ``RunConfig``."""
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ConfigError("<root>", f"not valid YAML: {err}") from None
    return config_from_dict(data)


def serialize(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
