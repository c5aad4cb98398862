"""Experiment orchestration: configs, seeding, replica scheduling, reports and the CLI."""
from .config import KINDS, ExperimentConfig, bundled_config, from_dict, load_config
from .runner import RunResult, rerun, run
from .seeding import derive_seed, label_for, stream
from .thresholds import THRESHOLDS, Threshold, resolve

__all__ = [
    "KINDS", "ExperimentConfig", "bundled_config", "from_dict", "load_config", "RunResult", "rerun", "run",
    "derive_seed", "label_for", "stream", "THRESHOLDS", "Threshold", "resolve",
]
