"""CLI, config files, and binary persistence for datasets and checkpoints."""

from .config import dump_config, load_config, parse_axes, parse_config
from .persist import (
    checkpoint_bytes,
    checkpoint_from_bytes,
    dataset_bytes,
    dataset_from_bytes,
    load_checkpoint,
    load_dataset,
    save_checkpoint,
    save_dataset,
)

__all__ = [
    "checkpoint_bytes",
    "checkpoint_from_bytes",
    "dataset_bytes",
    "dataset_from_bytes",
    "dump_config",
    "load_checkpoint",
    "load_config",
    "load_dataset",
    "parse_axes",
    "parse_config",
    "save_checkpoint",
    "save_dataset",
]
