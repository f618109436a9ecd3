"""Experiment harness: config loading, runs, sweeps, aggregation and verification."""

from .aggregate import bootstrap_band, cmd_aggregate
from .config import ConfigError, load_config, validate_config
from .runner import cmd_run, run_seed
from .sweep import cmd_sweep
from .verify import run_verification

__all__ = ["ConfigError", "load_config", "validate_config", "cmd_run", "run_seed", "cmd_sweep",
           "cmd_aggregate", "bootstrap_band", "run_verification"]
