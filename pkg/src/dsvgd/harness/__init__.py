"""Experiment runner: configuration, data, persistence and the command line."""

from .config import ConfigError, ExperimentConfig, load_config, parse_values
from .data import load_dataset, partition_dataset
from .runner import run_experiment
from .snapshots import export_snapshot, import_snapshot

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "export_snapshot",
    "import_snapshot",
    "load_config",
    "load_dataset",
    "parse_values",
    "partition_dataset",
    "run_experiment",
]
