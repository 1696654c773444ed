"""Experiment configuration: INI files flattened to dotted keys.

A file such as::

    [experiment]
    protocol = dsvgd
    model = toy1d

    [federation]
    rounds = 10

is read as ``{"experiment.protocol": "dsvgd", "experiment.model": "toy1d",
"federation.rounds": "10"}``. Every key has a typed default in ``SCHEMA``;
unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Optional

PROTOCOLS = ("dsvgd", "udsvgd", "pvi1", "svgd", "sgld", "dsgld", "fedavg")
MODELS = ("toy1d", "toy2d", "blr", "mlp")
TOY_MODELS = ("toy1d", "toy2d")
NORMALIZATIONS = ("none", "standardize", "pixel")
TASKS = ("auto", "binary", "multiclass", "regression")
OPTIMIZERS = ("adagrad", "plain")


class ConfigError(ValueError):
    """Invalid experiment configuration; the message starts with the key."""


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional_int(text):
    if text is None or str(text).strip().lower() in ("", "none"):
        return None
    return int(text)


def _names(text) -> tuple:
    if isinstance(text, (tuple, list)):
        return tuple(text)
    return tuple(s.strip() for s in str(text).split(",") if s.strip())


# dotted key -> (attribute, parser, default)
SCHEMA: dict[str, tuple[str, Callable[[Any], Any], Any]] = {
    "experiment.protocol": ("protocol", str, "dsvgd"),
    "experiment.model": ("model", str, "toy1d"),
    "experiment.seed": ("seed", int, 0),
    "experiment.out": ("out", str, "runs/default"),
    "federation.agents": ("agents", int, 2),
    "federation.particles": ("particles", int, 200),
    "federation.rounds": ("rounds", int, 10),
    "federation.local_steps": ("local_steps", int, 200),
    "federation.distill_steps": ("distill_steps", int, 200),
    "federation.alpha": ("alpha", float, 1.0),
    "federation.kde_bandwidth": ("kde_bandwidth", float, 0.55),
    "optimizer.kind": ("optimizer", str, "adagrad"),
    "optimizer.lr": ("lr", float, 0.01),
    "optimizer.distill_lr": ("distill_lr", float, 0.01),
    "optimizer.momentum": ("momentum", float, 0.9),
    "optimizer.fudge": ("fudge", float, 1e-6),
    "optimizer.a0": ("a0", float, 0.01),
    "optimizer.scale_by_particles": ("scale_by_particles", _bool, False),
    "model.toy_prior": ("toy_prior", str, "gaussian"),
    "model.hidden": ("hidden", int, 50),
    "data.source": ("source", str, "synthetic:separable2d"),
    "data.label_column": ("label_column", str, "0"),
    "data.task": ("task", str, "auto"),
    "data.normalization": ("normalization", str, "none"),
    "data.test_fraction": ("test_fraction", float, 0.2),
    "data.max_rows": ("max_rows", _optional_int, None),
    "data.num_rows": ("num_rows", int, 2000),
    "data.batch_size": ("batch_size", _optional_int, None),
    "metrics.names": ("metrics", _names, ()),
    "metrics.every": ("eval_every", int, 1),
    "metrics.kl_bandwidth": ("kl_bandwidth", float, 0.55),
    "metrics.predictive_bandwidth": ("predictive_bandwidth", float, 0.55),
    "metrics.bins": ("bins", int, 10),
    "metrics.snapshots": ("snapshots", _bool, False),
}

_ATTR_TO_KEY = {attr: key for key, (attr, _, _) in SCHEMA.items()}


@dataclass(frozen=True)
class ExperimentConfig:
    protocol: str = "dsvgd"
    model: str = "toy1d"
    seed: int = 0
    out: str = "runs/default"
    agents: int = 2
    particles: int = 200
    rounds: int = 10
    local_steps: int = 200
    distill_steps: int = 200
    alpha: float = 1.0
    kde_bandwidth: float = 0.55
    optimizer: str = "adagrad"
    lr: float = 0.01
    distill_lr: float = 0.01
    momentum: float = 0.9
    fudge: float = 1e-6
    a0: float = 0.01
    scale_by_particles: bool = False
    toy_prior: str = "gaussian"
    hidden: int = 50
    source: str = "synthetic:separable2d"
    label_column: str = "0"
    task: str = "auto"
    normalization: str = "none"
    test_fraction: float = 0.2
    max_rows: Optional[int] = None
    num_rows: int = 2000
    batch_size: Optional[int] = None
    metrics: tuple = field(default_factory=tuple)
    eval_every: int = 1
    kl_bandwidth: float = 0.55
    predictive_bandwidth: float = 0.55
    bins: int = 10
    snapshots: bool = False

    def __post_init__(self):
        validate(self)

    @property
    def is_toy(self) -> bool:
        return self.model in TOY_MODELS

    def metric_names(self) -> tuple:
        if self.metrics:
            return self.metrics
        if self.is_toy:
            return ("kl", "mean")
        return ("accuracy", "loglik", "mce", "rmse")

    def to_dotted(self) -> dict:
        out = {}
        for key, (attr, _, _) in SCHEMA.items():
            value = getattr(self, attr)
            out[key] = ",".join(value) if isinstance(value, tuple) else value
        return out

    def replace(self, **changes) -> "ExperimentConfig":
        values = {attr: getattr(self, attr) for attr in _ATTR_TO_KEY}
        values.update(changes)
        return ExperimentConfig(**values)


def _fail(attr: str, message: str):
    raise ConfigError(f"{_ATTR_TO_KEY.get(attr, attr)}: {message}")


def validate(cfg: ExperimentConfig) -> None:
    """Raise ``ConfigError`` naming the first offending key."""
    if cfg.protocol not in PROTOCOLS:
        _fail("protocol", f"unknown protocol {cfg.protocol!r}; expected one of {', '.join(PROTOCOLS)}")
    if cfg.model not in MODELS:
        _fail("model", f"unknown model {cfg.model!r}; expected one of {', '.join(MODELS)}")
    for attr in ("agents", "particles", "rounds", "local_steps", "distill_steps", "hidden", "eval_every", "bins", "num_rows"):
        if getattr(cfg, attr) < 1:
            _fail(attr, f"must be >= 1, got {getattr(cfg, attr)}")
    for attr in ("alpha", "kde_bandwidth", "lr", "distill_lr", "fudge", "a0", "kl_bandwidth", "predictive_bandwidth"):
        if not getattr(cfg, attr) > 0:
            _fail(attr, f"must be positive, got {getattr(cfg, attr)}")
    if not 0.0 <= cfg.momentum < 1.0:
        _fail("momentum", f"must lie in [0, 1), got {cfg.momentum}")
    if cfg.optimizer not in OPTIMIZERS:
        _fail("optimizer", f"unknown optimizer {cfg.optimizer!r}")
    if cfg.normalization not in NORMALIZATIONS:
        _fail("normalization", f"unknown normalization {cfg.normalization!r}")
    if cfg.task not in TASKS:
        _fail("task", f"unknown task {cfg.task!r}")
    if not 0.0 <= cfg.test_fraction < 1.0:
        _fail("test_fraction", f"must lie in [0, 1), got {cfg.test_fraction}")
    if cfg.max_rows is not None and cfg.max_rows < 1:
        _fail("max_rows", f"must be >= 1, got {cfg.max_rows}")
    if cfg.batch_size is not None and cfg.batch_size < 1:
        _fail("batch_size", f"must be >= 1, got {cfg.batch_size}")
    if cfg.toy_prior not in ("uniform", "gaussian"):
        _fail("toy_prior", f"unknown toy prior {cfg.toy_prior!r}")
    if cfg.is_toy:
        if cfg.protocol == "fedavg":
            _fail("protocol", "fedavg needs a predictive model (blr or mlp), not a toy target")
        if cfg.agents != 2:
            _fail("agents", f"the toy targets have exactly 2 agents, got {cfg.agents}")
        if cfg.model == "toy2d" and cfg.toy_prior == "uniform":
            _fail("toy_prior", "toy2d only has a Gaussian prior")
    if cfg.protocol == "pvi1":
        if cfg.particles != 1:
            _fail("particles", f"pvi1 requires exactly one particle, got {cfg.particles}")
        if cfg.optimizer != "plain":
            _fail("optimizer", "pvi1 requires the plain fixed step")
    if cfg.protocol == "dsgld" and cfg.particles < cfg.agents:
        _fail("particles", f"dsgld needs at least one chain per agent ({cfg.agents}), got {cfg.particles}")
    if cfg.source.startswith("synthetic:") and cfg.source not in ("synthetic:separable2d", "synthetic:regression1d"):
        _fail("source", f"unknown synthetic dataset {cfg.source!r}")


def parse_values(values: Mapping[str, Any]) -> ExperimentConfig:
    """Build a config from dotted keys with string (or already typed) values."""
    kwargs = {}
    for key, raw in values.items():
        if key not in SCHEMA:
            raise ConfigError(f"{key}: unknown key")
        attr, parser, _ = SCHEMA[key]
        try:
            kwargs[attr] = parser(raw) if isinstance(raw, str) or parser is _names else raw
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: cannot parse {raw!r} ({exc})") from None
    return ExperimentConfig(**kwargs)


def read_config_file(path) -> dict:
    """Flatten an INI file into ``{"section.key": "value"}``."""
    parser = configparser.ConfigParser(interpolation=None)
    path = Path(path)
    try:
        with path.open() as fh:
            parser.read_file(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return {f"{section}.{key}": value for section in parser.sections() for key, value in parser.items(section)}


def load_config(path, overrides: Optional[Mapping[str, Any]] = None) -> ExperimentConfig:
    """Read ``path`` and apply dotted-key ``overrides`` (CLI flags win)."""
    values = read_config_file(path)
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value if isinstance(value, str) else str(value)
    return parse_values(values)
