"""Run configuration: a TOML file layered over built-in defaults."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import tomli

from .fsvgd import InferenceConfig
from .scorenet import ScoreNetConfig


class ConfigError(ValueError):
    """Invalid or unreadable run configuration."""


@dataclass(frozen=True)
class EnvConfig:
    kind: str = "sinusoid"
    num_tasks: int = 20
    points_per_task: int = 8
    noise_std: float = 0.1
    num_test_tasks: int = 4
    context_points: int = 8
    test_points: int = 50
    # csv environments
    train_paths: tuple[str, ...] = ()
    test_paths: tuple[str, ...] = ()
    input_cols: tuple[str, ...] = ("x",)
    target_col: str = "y"

    def __post_init__(self):
        if self.kind not in ("sinusoid", "csv"):
            raise ConfigError(f"env.kind must be 'sinusoid' or 'csv', got {self.kind!r}")
        for name in ("num_tasks", "points_per_task", "num_test_tasks", "context_points", "test_points"):
            if getattr(self, name) < 1:
                raise ConfigError(f"env.{name} must be a positive integer")
        if self.noise_std < 0:
            raise ConfigError("env.noise_std must be non-negative")
        if self.kind == "csv" and not self.train_paths:
            raise ConfigError("env.train_paths is required for csv environments")


@dataclass(frozen=True)
class InterpolatorConfig:
    kind: str = "gp"
    signal_variance: float = 1.0
    noise_variance: float = 0.01
    lengthscale: float | None = None
    dropout_prob: float = 0.1
    epochs: int = 100
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 8

    def __post_init__(self):
        if self.kind not in ("gp", "mc-dropout"):
            raise ConfigError(f"interpolator.kind must be 'gp' or 'mc-dropout', got {self.kind!r}")
        if self.signal_variance <= 0 or self.noise_variance <= 0:
            raise ConfigError("interpolator variances must be positive")
        if self.lengthscale is not None and self.lengthscale <= 0:
            raise ConfigError("interpolator.lengthscale must be positive")
        if not 0 <= self.dropout_prob < 1:
            raise ConfigError("interpolator.dropout_prob must be in [0, 1)")


@dataclass(frozen=True)
class BaselineConfig:
    gp_prior_lengthscale: float = 1.0
    vanilla_weight_decay: float = 1e-2
    ssge_lengthscale: float = 0.2
    hidden: tuple[int, ...] = (32, 32, 32)


@dataclass(frozen=True)
class BenchConfig:
    # one marginal and sample set shared by all seeds; seeds vary the estimator training
    data_seed: int = 0
    num_samples: int = 50
    num_eval: int = 200
    train_iters: int = 2000
    learning_rate: float = 2e-5

    def __post_init__(self):
        if self.num_samples < 2 or self.num_eval < 1 or self.train_iters < 0 or self.data_seed < 0:
            raise ConfigError("bench sizes are invalid")
        if not self.learning_rate > 0:
            raise ConfigError("bench.learning_rate must be positive")


# Desk-scale defaults: a narrower score network and shorter schedules than
# the reference setup, tuned to finish the sinusoid study in minutes on one core.
DEFAULT_SCORENET = ScoreNetConfig(num_heads=4, key_size=8, train_iters=1000)
DEFAULT_INFERENCE = InferenceConfig(step_size=3e-4, steps=6000, bandwidth=3.0)


@dataclass(frozen=True)
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    interpolator: InterpolatorConfig = field(default_factory=InterpolatorConfig)
    scorenet: ScoreNetConfig = DEFAULT_SCORENET
    inference: InferenceConfig = DEFAULT_INFERENCE
    baselines: BaselineConfig = field(default_factory=BaselineConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)

    def to_dict(self) -> dict:
        return asdict(self)

    def with_overrides(self, **sections) -> "RunConfig":
        return replace(self, **sections)


_SECTIONS = {
    "env": EnvConfig,
    "interpolator": InterpolatorConfig,
    "scorenet": ScoreNetConfig,
    "inference": InferenceConfig,
    "baselines": BaselineConfig,
    "bench": BenchConfig,
}


def _build(cls, base, table: dict, section: str):
    if not isinstance(table, dict):
        raise ConfigError(f"[{section}] must be a table")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(table) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in table.items()}
    try:
        return replace(base, **values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{section}]: {e}") from e


def config_from_dict(doc: dict, base_dir: Path | None = None) -> RunConfig:
    cfg = RunConfig()
    top_unknown = sorted(set(doc) - set(_SECTIONS) - {"seeds"})
    if top_unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(top_unknown)}")
    updates = {}
    for name, cls in _SECTIONS.items():
        if name in doc:
            updates[name] = _build(cls, getattr(cfg, name), doc[name], name)
    if "seeds" in doc:
        seeds = doc["seeds"]
        if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
            raise ConfigError("seeds must be a non-empty list of non-negative integers")
        updates["seeds"] = tuple(seeds)
    cfg = replace(cfg, **updates)
    if cfg.env.kind == "csv":
        cfg = replace(cfg, env=_resolve_paths(cfg.env, base_dir))
    return cfg


def _resolve_paths(env: EnvConfig, base_dir: Path | None) -> EnvConfig:
    def resolve(paths):
        out = []
        for p in paths:
            path = Path(p)
            if not path.is_absolute() and base_dir is not None:
                path = base_dir / path
            if not path.is_file():
                raise ConfigError(f"task file not found: {path}")
            out.append(str(path))
        return tuple(out)

    return replace(env, train_paths=resolve(env.train_paths), test_paths=resolve(env.test_paths))


def load_config(path: str | Path | None) -> RunConfig:
    """Parse a TOML config; `None` gives the defaults. Relative CSV paths resolve against the file."""
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            doc = tomli.load(fh)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e
    return config_from_dict(doc, path.parent)
