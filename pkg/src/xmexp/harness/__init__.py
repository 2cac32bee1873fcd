"""Configuration files, checkpoints, reports and the command line."""

from .checkpoint import (
    Checkpoint,
    CheckpointChecksumError,
    CheckpointError,
    CheckpointShapeError,
    CheckpointVersionError,
    load_checkpoint,
    save_checkpoint,
)
from .config import ConfigError, RunConfig, load_run_config, parse_run_config
from .report import write_report

__all__ = [
    "Checkpoint",
    "CheckpointChecksumError",
    "CheckpointError",
    "CheckpointShapeError",
    "CheckpointVersionError",
    "ConfigError",
    "RunConfig",
    "load_checkpoint",
    "load_run_config",
    "parse_run_config",
    "save_checkpoint",
    "write_report",
]
