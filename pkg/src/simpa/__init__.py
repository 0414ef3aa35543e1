"""Implicit-prior PAC-Bayes few-shot meta-learning (SImPa) on numpy."""

from .bound import BoundConfig, BoundReport, assemble_bound, compute_R0, compute_Ri, split_confidence
from .config import ExperimentConfig, load_config
from .meta import MetaState, Predictive, TrainConfig, init_state, predict, train

__version__ = "0.1.0"

__all__ = [
    "BoundConfig",
    "BoundReport",
    "ExperimentConfig",
    "MetaState",
    "Predictive",
    "TrainConfig",
    "assemble_bound",
    "compute_R0",
    "compute_Ri",
    "init_state",
    "load_config",
    "predict",
    "split_confidence",
    "train",
]
