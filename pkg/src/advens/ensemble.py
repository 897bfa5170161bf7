"""Simplex-weighted ensembles presented to attacks as one predictor.

Members are combined in logit space: ``sum_j w_j * logits_j(x)``. Because
cross-entropy is convex in the logits, the ensemble loss at any input is at
most the weighted mean of member losses. Probability averaging is available
for comparison (``combine="probs"``) but carries no such guarantee.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, SimplexError
from .models import CompositeModel, ModelParams

SIMPLEX_TOL = 1e-9


@dataclass(frozen=True)
class SimplexWeights:
    w: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "w", _checked(self.w))

    def __len__(self):
        return len(self.w)

    def __iter__(self):
        return iter(self.w)


def validate_simplex(w) -> SimplexWeights:
    """Check non-negativity and unit sum; never renormalises."""
    if isinstance(w, SimplexWeights):
        return w
    return SimplexWeights(tuple(w))


def _checked(w) -> tuple[float, ...]:
    values = [float(v) for v in w]
    if not values:
        raise SimplexError("empty weight vector")
    for j, v in enumerate(values):
        if not np.isfinite(v) or v < 0:
            raise SimplexError(f"weight {j} is {v}; weights must be finite and non-negative")
    total = float(np.sum(values))
    if abs(total - 1.0) > SIMPLEX_TOL:
        raise SimplexError(f"weights sum to {total!r}, not 1 (entries: {values})")
    return tuple(values)


class EnsemblePredictor:
    """Weighted combination of predictors sharing input width and class count."""

    def __init__(self, members: Sequence, weights, combine: str = "logits"):
        members = list(members)
        if not members:
            raise ContractError("an ensemble needs at least one member")
        weights = validate_simplex(weights)
        if len(weights) != len(members):
            raise ContractError(f"{len(members)} members but {len(weights)} weights")
        classes = {m.num_classes for m in members}
        if len(classes) != 1:
            raise ContractError(f"members disagree on class count: {sorted(classes)}")
        dims = {m.input_dim for m in members}
        if len(dims) != 1:
            raise ContractError(f"members disagree on input width: {sorted(dims)}")
        if combine not in ("logits", "probs"):
            raise ContractError(f"combine must be 'logits' or 'probs', got {combine!r}")
        self.members = tuple(members)
        self.weights = weights
        self.combine = combine
        self.num_classes = classes.pop()
        self.input_dim = dims.pop()

    def __len__(self):
        return len(self.members)

    @property
    def train_eps(self) -> tuple[float, ...]:
        return tuple(getattr(m, "train_eps", float("nan")) for m in self.members)

    def __call__(self, x) -> Tensor:
        return ensemble_logits(self, x)


def ensemble_logits(ens: EnsemblePredictor, x) -> Tensor:
    """Weighted sum of member outputs, reduced in member order.

    With ``combine="probs"`` the result is the log of the weighted mean of
    member softmax probabilities, which cross-entropy treats as logits.
    """
    x = ad.as_tensor(x)
    if len(ens.members) == 1:
        out = ens.members[0](x)
        return ad.log_softmax(out) if ens.combine == "probs" else out
    total = None
    for w, member in zip(ens.weights, ens.members):
        out = member(x)
        if ens.combine == "probs":
            out = ad.exp(ad.log_softmax(out))
        term = ad.scalar_mul(out, w)
        total = term if total is None else ad.add(total, term)
    return ad.log(total) if ens.combine == "probs" else total


def uniform_ensemble(members: Sequence, combine: str = "logits") -> EnsemblePredictor:
    members = list(members)
    if not members:
        raise ContractError("an ensemble needs at least one member")
    k = len(members)
    return EnsemblePredictor(members, [1.0 / k] * k, combine=combine)


def composite_ensemble(composites: Sequence[CompositeModel], weights=None, combine: str = "logits") -> EnsemblePredictor:
    """Ensemble of composites; uniform weights when ``weights`` is omitted."""
    composites = list(composites)
    if not all(isinstance(c, CompositeModel) for c in composites):
        raise ContractError("composite_ensemble members must all be CompositeModel")
    if weights is None:
        return uniform_ensemble(composites, combine)
    return EnsemblePredictor(composites, weights, combine)


def model_ensemble(models: Sequence[ModelParams], weights=None) -> EnsemblePredictor:
    models = list(models)
    if weights is None:
        return uniform_ensemble(models)
    return EnsemblePredictor(models, weights)
