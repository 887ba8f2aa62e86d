"""FedEU: federated segmentation with evidential uncertainty-weighted aggregation.

Top-level modules: ``tensor`` (autodiff), ``model`` (network and checkpoints),
``evidential`` (Dirichlet losses), ``cfe`` (client feature embedding),
``federation`` (rounds and aggregation), ``data`` (synthetic tasks) and
``cli``.
"""
from .config import ExperimentConfig, default_config, load_config
from .errors import FedEUError
from .federation import run_experiment

__version__ = "0.1.0"

__all__ = ["ExperimentConfig", "FedEUError", "default_config", "load_config", "run_experiment"]
