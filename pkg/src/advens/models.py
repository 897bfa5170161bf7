"""Feed-forward ReLU classifiers and robust+natural composites.

Weights are stored as read-only float64 arrays, ``W`` of shape ``[out, in]``.
Forward passes accept a single input vector or a ``[B, input_dim]`` batch and
return logits of matching rank.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError
from .seeding import rng_for


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    hidden_dims: tuple[int, ...]
    num_classes: int
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ContractError(f"layer widths must be positive: {self}")
        if not self.hidden_dims:
            raise ContractError("architecture needs at least one hidden layer")
        if self.num_classes < 2:
            raise ContractError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.activation != "relu":
            raise ContractError(f"unsupported activation {self.activation!r}")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.num_classes)

    def layer_shapes(self) -> list[tuple[tuple[int, int], tuple[int]]]:
        w = self.widths
        return [((w[i + 1], w[i]), (w[i + 1],)) for i in range(len(w) - 1)]


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Parameters of one MLP, ordered input to output.

    ``train_eps`` is the l2 radius the model was adversarially trained at
    (0 for natural training) and ``init_seed`` the initialisation seed.
    """

    arch: Architecture
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    train_eps: float = 0.0
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(_frozen(w) for w in self.weights))
        object.__setattr__(self, "biases", tuple(_frozen(b) for b in self.biases))
        shapes = self.arch.layer_shapes()
        if len(self.weights) != len(shapes) or len(self.biases) != len(shapes):
            raise ContractError("layer count does not match architecture")
        for i, ((ws, bs), w, b) in enumerate(zip(shapes, self.weights, self.biases)):
            if w.shape != ws or b.shape != bs:
                raise DimensionError(
                    f"layer {i}: expected weight {ws} / bias {bs}, got {w.shape} / {b.shape}"
                )
        if not self.train_eps >= 0:
            raise ContractError(f"train_eps must be >= 0, got {self.train_eps}")

    @property
    def input_dim(self) -> int:
        return self.arch.input_dim

    @property
    def num_classes(self) -> int:
        return self.arch.num_classes

    @property
    def penultimate_dim(self) -> int:
        return self.arch.hidden_dims[-1]

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        return out

    def with_arrays(self, arrays: Mapping[str, np.ndarray], **changes) -> "ModelParams":
        n = len(self.weights)
        fields = dict(arch=self.arch, train_eps=self.train_eps, init_seed=self.init_seed)
        fields.update(changes)
        return ModelParams(
            weights=tuple(arrays[f"w{i}"] for i in range(n)),
            biases=tuple(arrays[f"b{i}"] for i in range(n)),
            **fields,
        )

    def leaves(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad) for k, v in self.named_arrays().items()}

    def __call__(self, x) -> Tensor:
        return predict_logits(self, x)


def init_model(arch: Architecture, omega: int) -> ModelParams:
    """Glorot-uniform weights and zero biases drawn from a PRNG seeded by ``omega``."""
    rng = rng_for(omega)
    weights, biases = [], []
    for (out_dim, in_dim), _ in arch.layer_shapes():
        weights.append(glorot_uniform(rng, out_dim, in_dim))
        biases.append(np.zeros(out_dim))
    return ModelParams(arch, tuple(weights), tuple(biases), train_eps=0.0, init_seed=int(omega))


def _check_input(x: Tensor, input_dim: int):
    if x.ndim not in (1, 2) or x.shape[-1] != input_dim:
        raise DimensionError(f"expected input of width {input_dim}, got shape {x.shape}")


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.ndim == 1:
        return ad.add(ad.reshape(ad.matmul(w, ad.reshape(x, (-1, 1))), (-1,)), b)
    return ad.add(ad.matmul(x, ad.transpose(w)), b)


def features_with(tensors: Mapping[str, Tensor], num_layers: int, x) -> Tensor:
    """Post-ReLU output of the last hidden layer using explicit parameter leaves."""
    h = ad.as_tensor(x)
    for i in range(num_layers - 1):
        h = ad.relu(_linear(h, tensors[f"w{i}"], tensors[f"b{i}"]))
    return h


def logits_with(tensors: Mapping[str, Tensor], num_layers: int, x) -> Tensor:
    h = features_with(tensors, num_layers, x)
    last = num_layers - 1
    return _linear(h, tensors[f"w{last}"], tensors[f"b{last}"])


def predict_logits(model: ModelParams, x) -> Tensor:
    """Final-layer logits (no softmax), differentiable in ``x``."""
    x = ad.as_tensor(x)
    _check_input(x, model.input_dim)
    return logits_with(model.leaves(), len(model.weights), x)


def penultimate_features(model: ModelParams, x) -> Tensor:
    x = ad.as_tensor(x)
    _check_input(x, model.input_dim)
    return features_with(model.leaves(), len(model.weights), x)


def apply_head(model: ModelParams, features) -> Tensor:
    """The final linear layer of ``model`` applied to penultimate features."""
    return _linear(ad.as_tensor(features), Tensor(model.weights[-1]), Tensor(model.biases[-1]))


# ---------------------------------------------------------------------------
# composites


@dataclass(frozen=True, eq=False)
class CompositeModel:
    """Linear head over concatenated robust and natural penultimate features.

    The backbones are frozen: only ``head_weight`` and ``head_bias`` are ever
    trained.
    """

    robust_backbone: ModelParams
    natural_backbone: ModelParams
    head_weight: np.ndarray
    head_bias: np.ndarray
    head_seed: int = 0
    train_eps: float = 0.0
    backbones_frozen: bool = field(default=True, init=False)

    def __post_init__(self):
        object.__setattr__(self, "head_weight", _frozen(self.head_weight))
        object.__setattr__(self, "head_bias", _frozen(self.head_bias))
        r, n = self.robust_backbone, self.natural_backbone
        if r.num_classes != n.num_classes:
            raise ContractError(
                f"backbones disagree on class count: {r.num_classes} vs {n.num_classes}"
            )
        if r.input_dim != n.input_dim:
            raise DimensionError(f"backbones disagree on input width: {r.input_dim} vs {n.input_dim}")
        expected = (r.num_classes, r.penultimate_dim + n.penultimate_dim)
        if self.head_weight.shape != expected or self.head_bias.shape != (r.num_classes,):
            raise DimensionError(
                f"head must be {expected} + ({r.num_classes},), got "
                f"{self.head_weight.shape} + {self.head_bias.shape}"
            )

    @property
    def input_dim(self) -> int:
        return self.robust_backbone.input_dim

    @property
    def num_classes(self) -> int:
        return self.robust_backbone.num_classes

    def with_head(self, weight, bias, **changes) -> "CompositeModel":
        fields = dict(head_seed=self.head_seed, train_eps=self.train_eps)
        fields.update(changes)
        return CompositeModel(self.robust_backbone, self.natural_backbone, weight, bias, **fields)

    def __call__(self, x) -> Tensor:
        return composite_logits(self, x)


def make_composite(robust: ModelParams, natural: ModelParams, head_seed: int) -> CompositeModel:
    if robust.num_classes != natural.num_classes:
        raise ContractError(
            f"backbones disagree on class count: {robust.num_classes} vs {natural.num_classes}"
        )
    if not robust.train_eps > natural.train_eps:
        raise ContractError(
            "first backbone must be the robust one: "
            f"train_eps {robust.train_eps} <= {natural.train_eps}"
        )
    width = robust.penultimate_dim + natural.penultimate_dim
    weight = glorot_uniform(rng_for(head_seed), robust.num_classes, width)
    return CompositeModel(robust, natural, weight, np.zeros(robust.num_classes), head_seed=int(head_seed))


def composite_features(composite: CompositeModel, x) -> Tensor:
    """Concatenated ``[robust | natural]`` penultimate features."""
    x = ad.as_tensor(x)
    _check_input(x, composite.input_dim)
    fr = penultimate_features(composite.robust_backbone, x)
    fn = penultimate_features(composite.natural_backbone, x)
    return ad.concat([fr, fn], axis=-1)


def composite_logits_with(composite: CompositeModel, head_w: Tensor, head_b: Tensor, x) -> Tensor:
    return _linear(composite_features(composite, x), head_w, head_b)


def composite_logits(composite: CompositeModel, x) -> Tensor:
    return composite_logits_with(composite, Tensor(composite.head_weight), Tensor(composite.head_bias), x)


def parameter_bytes(model: ModelParams) -> bytes:
    """Raw little-endian bytes of every parameter, in layer order."""
    return b"".join(a.astype("<f8").tobytes() for a in model.named_arrays().values())
