"""Run configuration: JSON file + command-line overrides + path environment overrides."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .il import ILConfig
from .rl import TrainerConfig, penalty_set
from .sim import PenaltyKind

PATH_ENV = {
    "scenario_dir": "DESKDRIVE_SCENARIO_DIR",
    "dataset": "DESKDRIVE_DATASET",
    "checkpoint_dir": "DESKDRIVE_CHECKPOINT_DIR",
    "report_dir": "DESKDRIVE_REPORT_DIR",
}


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class Paths:
    """``None`` entries resolve under the output directory; ``scenario_dir=None`` means the bundled pack."""

    scenario_dir: str | None = None
    dataset: str | None = None
    checkpoint_dir: str | None = None
    report_dir: str | None = None


@dataclass(frozen=True)
class DatasetOptions:
    steps_per_scenario: int = 260
    epsilon: float = 0.2
    n_aux: int = 2


@dataclass(frozen=True)
class EvalOptions:
    generator: str = "decoder"
    workers: int = 1


@dataclass(frozen=True)
class RunConfig:
    paths: Paths = field(default_factory=Paths)
    dataset: DatasetOptions = field(default_factory=DatasetOptions)
    il: ILConfig = field(default_factory=ILConfig)
    rl: TrainerConfig = field(default_factory=lambda: TrainerConfig(workers=1))
    eval: EvalOptions = field(default_factory=EvalOptions)
    seed: int = 0

    def resolved(self) -> "RunConfig":
        """Push the global seed into every stage."""
        return replace(self, il=replace(self.il, seed=self.seed), rl=replace(self.rl, seed=self.seed))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rl"]["penalties"] = sorted(PenaltyKind(p).value for p in self.rl.penalties)
        return d


_SECTIONS = {"paths": Paths, "dataset": DatasetOptions, "il": ILConfig, "rl": TrainerConfig, "eval": EvalOptions}


def _section(name: str, cls, data, defaults) -> object:
    """Validate ``data`` and layer it over ``defaults``, the run-level default for the section."""
    if not isinstance(data, dict):
        raise ConfigError(name, "expected an object")
    known = {f.name: f for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown field")
    kw = dict(data)
    if cls is TrainerConfig and "penalties" in kw:
        try:
            kw["penalties"] = penalty_set(kw["penalties"])
        except ValueError as exc:
            raise ConfigError(f"{name}.penalties", str(exc)) from None
    for key, value in kw.items():
        want = getattr(defaults, key)
        if isinstance(want, bool) and not isinstance(value, bool):
            raise ConfigError(f"{name}.{key}", "expected a boolean")
        if isinstance(want, (int, float)) and not isinstance(want, bool):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{name}.{key}", "expected a number")
            if isinstance(want, int) and not isinstance(want, bool) and not float(value).is_integer():
                raise ConfigError(f"{name}.{key}", "expected an integer")
            kw[key] = type(want)(value)
    return replace(defaults, **kw)


def config_from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("<root>", "expected an object")
    for key in d:
        if key not in _SECTIONS and key != "seed":
            raise ConfigError(key, "unknown field")
    base = RunConfig()
    kw = {name: _section(name, cls, d[name], getattr(base, name)) for name, cls in _SECTIONS.items() if name in d}
    if "seed" in d:
        if isinstance(d["seed"], bool) or not isinstance(d["seed"], int):
            raise ConfigError("seed", "expected an integer")
        kw["seed"] = d["seed"]
    return RunConfig(**kw)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError("--config", f"file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("--config", f"invalid JSON: {exc}") from None
    return config_from_dict(data)


def apply_env(cfg: RunConfig, environ=os.environ) -> RunConfig:
    """Path fields only may be overridden from the environment."""
    over = {k: environ[v] for k, v in PATH_ENV.items() if environ.get(v)}
    return replace(cfg, paths=replace(cfg.paths, **over)) if over else cfg


def validate(cfg: RunConfig) -> None:
    """Field-level checks; raises :class:`ConfigError`."""
    for name, section in (("il", cfg.il), ("rl", cfg.rl)):
        try:
            section.validate()
        except ValueError as exc:
            raise ConfigError(name, str(exc)) from None
    if cfg.dataset.steps_per_scenario <= 0:
        raise ConfigError("dataset.steps_per_scenario", "must be positive")
    if not 0.0 <= cfg.dataset.epsilon <= 1.0:
        raise ConfigError("dataset.epsilon", "must lie in [0, 1]")
    if cfg.dataset.n_aux < 0:
        raise ConfigError("dataset.n_aux", "must be nonnegative")
    if cfg.eval.generator not in ("decoder", "oracle"):
        raise ConfigError("eval.generator", "must be 'decoder' or 'oracle'")
    if cfg.eval.workers <= 0:
        raise ConfigError("eval.workers", "must be positive")
    if cfg.paths.scenario_dir is not None and not Path(cfg.paths.scenario_dir).is_dir():
        raise ConfigError("paths.scenario_dir", f"not a directory: {cfg.paths.scenario_dir}")
