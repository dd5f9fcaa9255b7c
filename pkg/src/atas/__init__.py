"""Adversarial training with adaptive per-example step sizes, its baselines,
diagnostics for catastrophic overfitting, and a saddle-point regret lab."""

__version__ = "0.1.0"

from .attacks import AttackSpec, fgsm, pgd, pgd_eval_spec
from .adaptive import AdaptiveConfig, StateTable
from .config import ConfigError, load_config, parse_config
from .data import Dataset, synth_generate
from .diagnostics import detect_co, grad_norm_profile, loss_surface
from .models import ModelConfig, build
from .trainers import TRAINERS, TrainConfig, fit

__all__ = ["AttackSpec", "fgsm", "pgd", "pgd_eval_spec", "AdaptiveConfig", "StateTable",
           "ConfigError", "load_config", "parse_config", "Dataset", "synth_generate",
           "detect_co", "grad_norm_profile", "loss_surface", "ModelConfig", "build",
           "TRAINERS", "TrainConfig", "fit"]
