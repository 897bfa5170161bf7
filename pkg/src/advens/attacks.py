"""l2-bounded projected gradient ascent on softmax cross-entropy.

A predictor is any callable mapping an input :class:`Tensor` (``[d]`` or
``[B, d]``) to logits of the same rank. Attacks on a batch are vectorised,
but each row is still an independent per-example attack. The summed batch
loss decouples across rows, and every row has its own random start,
step normalisation, projection and best-iterate bookkeeping.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, NumericError
from .seeding import rng_for

Predictor = Callable[[Tensor], Tensor]

TRAIN_STEPS = 10
EVAL_STEPS = 50
TRAIN_RESTARTS = 1
EVAL_RESTARTS = 3


@dataclass(frozen=True)
class AttackConfig:
    """PGD settings. ``step_size=None`` means ``2.5 * epsilon / steps``.

    ``zero_start`` adds one run that begins at the clean input on top of the
    ``restarts`` random starts. Evaluation attacks enable it: with the short
    default step a random start near the sphere turns toward the optimum only
    slowly, while a run from the origin walks straight to it on near-linear
    losses.
    """

    epsilon: float = 0.0
    steps: int = EVAL_STEPS
    step_size: float | None = None
    random_start: bool = True
    seed: int = 0
    restarts: int = EVAL_RESTARTS
    clip: tuple[float, float] | None = None
    zero_start: bool = False

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ContractError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 1 or self.restarts < 1:
            raise ContractError(f"steps and restarts must be >= 1, got {self.steps}, {self.restarts}")
        if self.step_size is not None and not self.step_size > 0:
            raise ContractError(f"step_size must be positive, got {self.step_size}")

    @classmethod
    def training(cls, epsilon: float, seed: int = 0, **kw) -> "AttackConfig":
        return cls(epsilon=epsilon, steps=TRAIN_STEPS, restarts=TRAIN_RESTARTS, seed=seed, **kw)

    @classmethod
    def evaluation(cls, epsilon: float = 0.0, seed: int = 0, **kw) -> "AttackConfig":
        kw.setdefault("zero_start", True)
        return cls(epsilon=epsilon, steps=EVAL_STEPS, restarts=EVAL_RESTARTS, seed=seed, **kw)

    @property
    def effective_step_size(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return 2.5 * self.epsilon / self.steps

    def replace(self, **changes) -> "AttackConfig":
        return dataclasses.replace(self, **changes)

    def describe(self) -> str:
        step = "auto" if self.step_size is None else repr(self.step_size)
        return (
            f"pgd-l2(steps={self.steps},step_size={step},restarts={self.restarts},"
            f"random_start={int(self.random_start)},zero_start={int(self.zero_start)},seed={self.seed})"
        )


def project_l2(delta, epsilon: float) -> np.ndarray:
    """Project onto the l2 ball of radius ``epsilon`` (rows independently for 2-D input)."""
    d = np.asarray(delta.data if isinstance(delta, Tensor) else delta, dtype=np.float64)
    norm = np.linalg.norm(d, axis=-1, keepdims=True)
    scale = np.where(norm > epsilon, epsilon / np.where(norm > 0, norm, 1.0), 1.0)
    return d * scale


def random_ball_point(rng: np.random.Generator, dim: int, epsilon: float, n: int | None = None) -> np.ndarray:
    """Uniform sample(s) from the ``dim``-dimensional l2 ball of radius ``epsilon``.

    Gaussian direction, radius ``epsilon * U**(1/dim)``. With ``n`` given,
    returns ``n`` rows.
    """
    rows = 1 if n is None else n
    direction = rng.standard_normal((rows, dim))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = epsilon * rng.uniform(size=(rows, 1)) ** (1.0 / dim)
    out = radius * direction
    return out[0] if n is None else out


def batch_loss(predictor: Predictor, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-example cross-entropy without building a gradient record."""
    return ad.cross_entropy(predictor(Tensor(x)), y).data


def _loss_and_input_grad(predictor, x, y, delta):
    leaf = Tensor(delta, requires_grad=True)
    losses = ad.cross_entropy(predictor(ad.add(Tensor(x), leaf)), y)
    grad = ad.backward(ad.sum(losses), [leaf])[0]
    return losses.data, grad


def pgd_attack_batch(
    predictor: Predictor,
    x: np.ndarray,
    y: np.ndarray,
    cfg: AttackConfig,
    seeds: Sequence[int] | int | None = None,
    start: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Attack every row of ``x``; returns ``(deltas, losses)`` at the returned deltas.

    ``seeds`` gives one random-start seed per row (default ``cfg.seed`` for
    all rows); a single int instead draws all rows' starts from one
    generator, which is faster but ties each start to the batch.

    ``start``, when given, is run as an extra restart beginning at those
    perturbations (projected into the ball). Within each restart the best
    iterate seen, including the start, is kept, so the returned loss is never
    below the loss at any start.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y))
    n, dim = x.shape
    eps = float(cfg.epsilon)
    if eps == 0.0:
        zeros = np.zeros_like(x)
        return zeros, batch_loss(predictor, x, y)
    if seeds is None:
        seeds = [cfg.seed] * n
    elif not np.isscalar(seeds) and len(seeds) != n:
        raise ContractError(f"got {len(seeds)} seeds for {n} examples")

    starts = [np.zeros_like(x)] if cfg.zero_start else []
    for r in range(cfg.restarts):
        if cfg.random_start and np.isscalar(seeds):
            starts.append(random_ball_point(rng_for(seeds, r), dim, eps, n))
        elif cfg.random_start:
            starts.append(np.stack([random_ball_point(rng_for(s, r), dim, eps) for s in seeds]))
        else:
            starts.append(np.zeros_like(x))
    if start is not None:
        starts.append(project_l2(np.asarray(start, dtype=np.float64).reshape(x.shape), eps))

    step_size = cfg.effective_step_size
    best_delta = np.zeros_like(x)
    best_loss = np.full(n, -np.inf)
    for delta in starts:
        delta = _clip(x, delta, cfg.clip)
        for step in range(cfg.steps + 1):
            if step < cfg.steps:
                losses, grad = _loss_and_input_grad(predictor, x, y, delta)
            else:
                losses = batch_loss(predictor, x + delta, y)
            if not np.all(np.isfinite(losses)):
                raise NumericError(f"non-finite attack loss at step {step}")
            better = losses > best_loss
            best_loss = np.where(better, losses, best_loss)
            best_delta = np.where(better[:, None], delta, best_delta)
            if step == cfg.steps:
                break
            norm = np.linalg.norm(grad, axis=1, keepdims=True)
            direction = np.divide(grad, norm, out=np.zeros_like(grad), where=norm > 0)
            delta = project_l2(delta + step_size * direction, eps)
            delta = _clip(x, delta, cfg.clip)
    return best_delta, best_loss


def _clip(x, delta, clip):
    if clip is None:
        return delta
    lo, hi = clip
    return np.clip(x + delta, lo, hi) - x


def pgd_attack(predictor: Predictor, x, y: int, cfg: AttackConfig, start=None) -> np.ndarray:
    """Worst-case perturbation of one example inside the ``cfg.epsilon`` l2 ball."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if x.ndim != 1:
        raise ContractError(f"pgd_attack takes a single input vector, got shape {x.shape}")
    s = None if start is None else np.asarray(start)[None, :]
    delta, _ = pgd_attack_batch(predictor, x[None, :], np.array([y]), cfg, start=s)
    return delta[0]


# ---------------------------------------------------------------------------
# closed-form oracle for two-class linear predictors


class LinearPredictor:
    """Two-class predictor with logits ``[w.x + b, 0]``.

    Increasing ``w.x`` favours class 0.
    """

    def __init__(self, w, b: float = 0.0):
        self.w = np.asarray(w, dtype=np.float64)
        self.b = float(b)
        self.input_dim = self.w.shape[0]
        self.num_classes = 2

    def __call__(self, x) -> Tensor:
        x = ad.as_tensor(x)
        if x.ndim == 1:
            score = ad.add(ad.sum(ad.mul(x, Tensor(self.w))), Tensor(self.b))
            return ad.concat([ad.reshape(score, (1,)), Tensor(np.zeros(1))])
        score = ad.add(ad.matmul(x, Tensor(self.w[:, None])), Tensor(self.b))
        return ad.concat([score, Tensor(np.zeros((x.shape[0], 1)))], axis=1)

    def margin(self, x, y) -> np.ndarray:
        """Signed l2 distance to the decision boundary, positive when correct."""
        x = np.atleast_2d(x)
        score = (x @ self.w + self.b) / np.linalg.norm(self.w)
        return np.where(np.asarray(y) == 0, score, -score)


def worst_case_linear(w, b: float, x, y: int, epsilon: float) -> np.ndarray:
    """Exact cross-entropy maximiser over the ball for ``LinearPredictor(w, b)``.

    The loss is monotone in the margin and the margin is linear in the
    perturbation, so the optimum moves the full radius against ``w``'s
    preferred direction for the true class.
    """
    w = np.asarray(w, dtype=np.float64)
    norm = np.linalg.norm(w)
    if norm == 0:
        raise ContractError("worst_case_linear: w must be nonzero")
    sign = 1.0 if y == 0 else -1.0
    return -epsilon * sign * w / norm
