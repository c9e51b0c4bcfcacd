"""Desk-scale simulator for federated visual prompt tuning with a server-side prompt generator."""

from .config import ConfigError, ExperimentConfig, load_config
from .encoder import EncoderConfig, EncoderWeights
from .orchestrator import ExperimentResult, run_experiment

__all__ = [
    "ConfigError",
    "EncoderConfig",
    "EncoderWeights",
    "ExperimentConfig",
    "ExperimentResult",
    "load_config",
    "run_experiment",
]
__version__ = "0.1.0"
