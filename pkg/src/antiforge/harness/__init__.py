"""Experiment harness: config, data, runners and result records."""

from .config import ConfigError, ExperimentConfig, build_config, load_config
from .experiments import (
    emit_spectra,
    protect_images,
    run_colorspace,
    run_effectiveness,
    run_magnitude_ablation,
    run_reconstruction,
    run_robustness,
    run_transfer,
)

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "build_config",
    "emit_spectra",
    "load_config",
    "protect_images",
    "run_colorspace",
    "run_effectiveness",
    "run_magnitude_ablation",
    "run_reconstruction",
    "run_robustness",
    "run_transfer",
]
