"""Natural, adversarial (PGD) and composite-head training by minibatch SGD.

Every routine is a deterministic function of its arguments. Minibatch order
is keyed by ``(data_seed, omega, epoch)`` and attack random starts by
``(attack seed, omega, epoch, minibatch)``, where ``omega`` is the model's
initialisation seed (the head seed for composites). Models with different
``omega`` therefore differ in initialisation, data order and attack starts.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .attacks import AttackConfig, pgd_attack_batch
from .autodiff import Tensor
from .data import Dataset
from .errors import ContractError
from .models import (
    Architecture,
    CompositeModel,
    ModelParams,
    composite_logits_with,
    init_model,
    logits_with,
)
from .seeding import rng_for, split_seed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    train_attack: AttackConfig = field(default_factory=lambda: AttackConfig.training(0.0))
    data_seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ContractError(f"epochs must be >= 0 and batch_size >= 1: {self}")
        if not self.lr > 0 or not 0 <= self.momentum < 1:
            raise ContractError(f"need lr > 0 and momentum in [0, 1): {self}")

    @property
    def epsilon(self) -> float:
        return self.train_attack.epsilon

    def at_epsilon(self, epsilon: float) -> "TrainConfig":
        return replace(self, train_attack=self.train_attack.replace(epsilon=float(epsilon)))


LogitsFn = Callable[[Mapping[str, Tensor], Tensor], Tensor]


def _sgd(arrays: dict[str, np.ndarray], logits_fn: LogitsFn, data: Dataset, cfg: TrainConfig, omega: int) -> dict:
    """Minibatch SGD on the (optionally PGD-perturbed) mean cross-entropy."""
    if len(data) == 0:
        raise ContractError("cannot train on an empty dataset")
    n = len(data)
    attack = cfg.train_attack
    velocity = None
    attack_stream = split_seed(attack.seed, omega)
    for epoch in range(cfg.epochs):
        order = rng_for(cfg.data_seed, omega, epoch).permutation(n)
        nat_total = adv_total = 0.0
        for batch, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start: start + cfg.batch_size]
            x, y = data.inputs[idx], data.labels[idx]
            if attack.epsilon > 0:
                frozen = {k: Tensor(v) for k, v in arrays.items()}
                batch_seed = split_seed(attack_stream, epoch * n + batch)
                delta, _ = pgd_attack_batch(lambda t: logits_fn(frozen, t), x, y, attack, seeds=batch_seed)
                if log.isEnabledFor(logging.INFO):
                    nat_total += ad.cross_entropy(logits_fn(frozen, Tensor(x)), y).data.sum()
                x = x + delta
            leaves = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
            losses = ad.cross_entropy(logits_fn(leaves, Tensor(x)), y)
            loss = ad.scalar_mul(ad.sum(losses), 1.0 / len(idx))
            grads = ad.backward(loss, leaves)
            arrays, velocity = ad.sgd_step(arrays, grads, cfg.lr, cfg.momentum, velocity)
            adv_total += losses.data.sum()
        if attack.epsilon == 0:
            nat_total = adv_total
        log.info("epoch=%d nat_loss=%.6f adv_loss=%.6f", epoch, nat_total / n, adv_total / n)
    return arrays


def _train_mlp(data: Dataset, arch: Architecture, cfg: TrainConfig, omega: int) -> ModelParams:
    if data.input_dim != arch.input_dim or data.num_classes != arch.num_classes:
        raise ContractError(
            f"data ({data.input_dim} features, {data.num_classes} classes) does not fit {arch}"
        )
    model = init_model(arch, omega)
    layers = len(model.weights)
    arrays = _sgd(model.named_arrays(), lambda p, x: logits_with(p, layers, x), data, cfg, omega)
    return model.with_arrays(arrays, train_eps=float(cfg.epsilon))


def train_standard(data: Dataset, arch: Architecture, cfg: TrainConfig, omega: int) -> ModelParams:
    """Natural training; ``cfg`` must carry a zero attack radius."""
    if cfg.epsilon != 0:
        raise ContractError(f"train_standard needs train_attack.epsilon == 0, got {cfg.epsilon}")
    return _train_mlp(data, arch, cfg, omega)


def train_robust(data: Dataset, arch: Architecture, cfg: TrainConfig, omega: int) -> ModelParams:
    """Adversarial training against per-example PGD at radius ``cfg.epsilon``."""
    if not cfg.epsilon > 0:
        raise ContractError(f"train_robust needs train_attack.epsilon > 0, got {cfg.epsilon}")
    return _train_mlp(data, arch, cfg, omega)


def train_model(data: Dataset, arch: Architecture, cfg: TrainConfig, omega: int) -> ModelParams:
    """Dispatch to natural or robust training by the configured radius."""
    if cfg.epsilon > 0:
        return train_robust(data, arch, cfg, omega)
    return train_standard(data, arch, cfg, omega)


def train_composite_head(composite: CompositeModel, data: Dataset, cfg: TrainConfig) -> CompositeModel:
    """PGD training of the head only; attacks see the whole composite."""
    if not cfg.epsilon > 0:
        raise ContractError(f"composite head training needs epsilon > 0, got {cfg.epsilon}")
    if data.input_dim != composite.input_dim:
        raise ContractError(f"data width {data.input_dim} != composite input {composite.input_dim}")
    arrays = {"head_weight": composite.head_weight, "head_bias": composite.head_bias}

    def logits_fn(p, x):
        return composite_logits_with(composite, p["head_weight"], p["head_bias"], x)

    arrays = _sgd(arrays, logits_fn, data, cfg, composite.head_seed)
    return composite.with_head(arrays["head_weight"], arrays["head_bias"], train_eps=float(cfg.epsilon))


def member_seeds(base_seed: int, k: int) -> list[int]:
    """Initialisation seeds ``split_seed(base_seed, j)`` for ``j = 1..k``."""
    return [split_seed(base_seed, j) for j in range(1, k + 1)]


def _member_job(args):
    data, arch, cfg, omega = args
    return train_model(data, arch, cfg, omega)


def train_ensemble_members(
    data: Dataset, arch: Architecture, cfg: TrainConfig, base_seed: int, k: int, workers: int = 1
) -> list[ModelParams]:
    """Train ``k`` members from split seeds; ``workers > 1`` uses a process pool.

    Each member depends only on its own seed, so pooled and sequential runs
    return identical parameters.
    """
    if k < 1:
        raise ContractError(f"need at least one ensemble member, got K={k}")
    jobs = [(data, arch, cfg, omega) for omega in member_seeds(base_seed, k)]
    if workers <= 1:
        return [_member_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_member_job, jobs))
