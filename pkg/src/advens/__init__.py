"""Adversarially robust ensembles and composites on a small numpy autodiff core."""

from .attacks import AttackConfig, pgd_attack, pgd_attack_batch, worst_case_linear
from .autodiff import Tensor, backward
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config, parse_config
from .data import Dataset, gen_two_gaussians, load_cifar10_binary, load_idx, split
from .ensemble import EnsemblePredictor, uniform_ensemble, validate_simplex
from .evaluation import (
    accuracy_curve,
    adversarial_accuracy,
    auc,
    equivalence_epsilon,
    evaluate,
    min_alpha_search,
    natural_accuracy,
)
from .experiment import run_experiment
from .models import Architecture, CompositeModel, ModelParams, init_model, make_composite
from .training import TrainConfig, train_composite_head, train_ensemble_members, train_robust, train_standard

__all__ = [name for name in dir() if not name.startswith("_")]
