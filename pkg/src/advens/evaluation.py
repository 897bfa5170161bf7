"""Accuracy under attack, accuracy curves over the radius, AUC, and the
ensemble-vs-single-model searches built on them.

Per-example attack seeds are ``split_seed(cfg.seed, index)``, so a given
example sees the same random starts at every radius and the results do not
depend on how the dataset is chunked or scheduled.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .attacks import AttackConfig, pgd_attack_batch
from .autodiff import Tensor
from .data import Dataset
from .ensemble import uniform_ensemble
from .errors import ContractError
from .models import Architecture, ModelParams
from .seeding import split_seed
from .training import TrainConfig, train_ensemble_members

CHUNK = 1024


@dataclass(frozen=True)
class AttackOutcome:
    deltas: np.ndarray
    losses: np.ndarray
    correct: np.ndarray

    @property
    def accuracy(self) -> float:
        return float(np.mean(self.correct))

    @property
    def loss(self) -> float:
        return float(np.mean(self.losses))


def example_seeds(seed: int, start: int, stop: int) -> list[int]:
    return [split_seed(seed, i) for i in range(start, stop)]


def _attack_chunk(args):
    predictor, x, y, cfg, lo, start = args
    seeds = example_seeds(cfg.seed, lo, lo + len(y))
    deltas, losses = pgd_attack_batch(predictor, x, y, cfg, seeds=seeds, start=start)
    pred = predictor(Tensor(x + deltas)).data.argmax(axis=1)
    return deltas, losses, pred == y


def attack_dataset(
    predictor, data: Dataset, epsilon: float, cfg: AttackConfig, start=None, workers: int = 1
) -> AttackOutcome:
    """Per-example PGD at ``epsilon`` over the whole dataset.

    Prediction is the argmax of the logits at ``x + delta`` (ties go to the
    lowest class index). At ``epsilon == 0`` the perturbation is zero, so
    this is exactly natural accuracy.
    """
    if len(data) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    cfg = cfg.replace(epsilon=float(epsilon))
    jobs = []
    for lo in range(0, len(data), CHUNK):
        hi = min(lo + CHUNK, len(data))
        s = None if start is None else np.asarray(start)[lo:hi]
        jobs.append((predictor, data.inputs[lo:hi], data.labels[lo:hi], cfg, lo, s))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_attack_chunk, jobs))
    else:
        parts = [_attack_chunk(j) for j in jobs]
    deltas, losses, correct = (np.concatenate(p) for p in zip(*parts))
    return AttackOutcome(deltas, losses, correct)


def natural_accuracy(predictor, data: Dataset) -> float:
    return attack_dataset(predictor, data, 0.0, AttackConfig.evaluation()).accuracy


def adversarial_accuracy(predictor, data: Dataset, epsilon: float, cfg: AttackConfig) -> float:
    """Fraction of examples still classified correctly under PGD at ``epsilon``."""
    return attack_dataset(predictor, data, epsilon, cfg).accuracy


def adversarial_loss(predictor, data: Dataset, epsilon: float, cfg: AttackConfig) -> float:
    """Mean cross-entropy at the PGD perturbation (the max-loss reading)."""
    return attack_dataset(predictor, data, epsilon, cfg).loss


def mean_over_inits(models: Sequence[ModelParams], data: Dataset, epsilon: float, cfg: AttackConfig) -> float:
    """Average adversarial accuracy of models attacked one at a time.

    Computed as total correct count over ``K * N`` with one rounding, so the
    result does not depend on member order and copies of one model give that
    model's accuracy bit for bit.
    """
    models = list(models)
    if not models:
        raise ContractError("mean_over_inits needs at least one model")
    levels = {m.train_eps for m in models}
    if len(levels) != 1:
        raise ContractError(f"models were trained at different radii: {sorted(levels)}")
    correct = sum(int(attack_dataset(m, data, epsilon, cfg).correct.sum()) for m in models)
    return correct / (len(models) * len(data))


# ---------------------------------------------------------------------------
# curves and AUC


@dataclass(frozen=True)
class AccuracyCurve:
    epsilons: tuple[float, ...]
    accuracies: tuple[float, ...]
    losses: tuple[float, ...] = ()
    attack_cfg_id: str = ""
    example_losses: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        eps = tuple(float(e) for e in self.epsilons)
        acc = tuple(float(a) for a in self.accuracies)
        if not eps or len(eps) != len(acc):
            raise ContractError("a curve needs matching, non-empty epsilon and accuracy lists")
        if any(b <= a for a, b in zip(eps, eps[1:])) or eps[0] < 0:
            raise ContractError(f"curve radii must be non-negative and strictly increasing: {eps}")
        if any(not 0.0 <= a <= 1.0 for a in acc):
            raise ContractError("curve accuracies must lie in [0, 1]")
        object.__setattr__(self, "epsilons", eps)
        object.__setattr__(self, "accuracies", acc)
        object.__setattr__(self, "losses", tuple(float(v) for v in self.losses))

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.epsilons, self.accuracies))

    @classmethod
    def from_points(cls, points, **kw) -> "AccuracyCurve":
        eps, acc = zip(*points)
        return cls(eps, acc, **kw)


def default_grid(eps_target: float, points: int = 11) -> list[float]:
    return [float(v) for v in np.linspace(0.0, eps_target, points)]


def accuracy_curve(
    predictor, data: Dataset, eps_grid: Sequence[float], cfg: AttackConfig, nested: bool = True
) -> AccuracyCurve:
    """Adversarial accuracy at each grid radius with shared per-example seeds.

    With ``nested`` the perturbation found at the previous radius is injected
    as an extra restart, which makes per-example loss non-decreasing along the grid.
    """
    grid = [float(e) for e in eps_grid]
    if not grid or grid[0] != 0.0 or any(b <= a for a, b in zip(grid, grid[1:])):
        raise ContractError(f"eps grid must start at 0 and strictly increase: {grid}")
    accs, losses, per_example = [], [], []
    prev = None
    for eps in grid:
        out = attack_dataset(predictor, data, eps, cfg, start=prev if nested else None)
        accs.append(out.accuracy)
        losses.append(out.loss)
        per_example.append(out.losses)
        prev = out.deltas
    return AccuracyCurve(grid, accs, losses, cfg.describe(), np.array(per_example))


def _restricted(eps, values, eps_target):
    if eps_target <= 0:
        raise ContractError(f"eps_target must be positive, got {eps_target}")
    if eps[0] != 0.0:
        raise ContractError(f"curve must start at epsilon 0, starts at {eps[0]}")
    if eps[-1] < eps_target:
        raise ContractError(f"curve ends at {eps[-1]} and does not cover target {eps_target}")
    xs, ys = [], []
    for e, v in zip(eps, values):
        if e >= eps_target:
            break
        xs.append(e)
        ys.append(v)
    xs.append(eps_target)
    ys.append(float(np.interp(eps_target, eps, values)))
    return xs, ys


def auc(curve, eps_target: float, values: Sequence[float] | None = None) -> float:
    """Trapezoid-rule mean of the curve over ``[0, eps_target]``.

    ``curve`` is an :class:`AccuracyCurve` or a sequence of ``(eps, acc)``
    pairs. The value at ``eps_target`` is linearly interpolated when it falls
    between grid points. ``values`` substitutes another series on the same
    radii (e.g. losses).
    """
    if not isinstance(curve, AccuracyCurve):
        curve = AccuracyCurve.from_points(curve)
    ys = curve.accuracies if values is None else tuple(values)
    xs, ys = _restricted(curve.epsilons, ys, float(eps_target))
    # deviations from the first value, so a constant curve integrates exactly
    ref = ys[0]
    area = math.fsum(
        (x1 - x0) * ((y0 - ref) + (y1 - ref)) / 2.0 for x0, x1, y0, y1 in zip(xs, xs[1:], ys, ys[1:])
    )
    return ref + area / eps_target


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class EvalReport:
    model_id: str
    natural_acc: float
    adversarial_acc: dict[float, float]
    adversarial_loss: dict[float, float]
    auc: float | None
    eps_target: float | None
    sample_count: int
    seeds: dict = field(default_factory=dict)
    attack: str = ""
    loss_auc: float | None = None

    def csv_rows(self) -> list[tuple]:
        """One row per radius, then an AUC row (flag 1) whose loss column is the
        radius-averaged loss."""
        rows = [(self.model_id, e, a, self.adversarial_loss[e], 0) for e, a in self.adversarial_acc.items()]
        if self.auc is not None:
            rows.append((self.model_id, self.eps_target, self.auc, self.loss_auc, 1))
        return rows


def evaluate(
    predictor, data: Dataset, eps_grid: Sequence[float], cfg: AttackConfig, model_id: str,
    eps_target: float | None = None, seeds: dict | None = None,
) -> EvalReport:
    """Curve plus AUC (when the grid starts at 0 and a target is given)."""
    curve = accuracy_curve(predictor, data, eps_grid, cfg)
    area = loss_area = None
    if eps_target is not None:
        area = auc(curve, eps_target)
        loss_area = auc(curve, eps_target, values=curve.losses)
    seeds = dict(seeds or {})
    seeds.setdefault("attack_seed", cfg.seed)
    return EvalReport(
        model_id=model_id,
        natural_acc=curve.accuracies[0],
        adversarial_acc=dict(zip(curve.epsilons, curve.accuracies)),
        adversarial_loss=dict(zip(curve.epsilons, curve.losses)),
        auc=area,
        eps_target=eps_target,
        sample_count=len(data),
        seeds=seeds,
        attack=cfg.describe(),
        loss_auc=loss_area,
    )


CSV_HEADER = "model_id,eps,acc,loss,auc_flag"


def format_csv(rows) -> str:
    """Rows ``(model_id, eps, acc, loss, auc_flag)``; the AUC row has flag 1."""
    lines = [CSV_HEADER]
    for model_id, eps, acc, loss, flag in rows:
        if "," in str(model_id) or "\n" in str(model_id):
            raise ContractError(f"model_id {model_id!r} may not contain commas or newlines")
        lines.append(f"{model_id},{eps:.6f},{acc:.6f},{loss:.6f},{int(flag)}")
    return "\n".join(lines) + "\n"


def write_csv(rows, path) -> None:
    Path(path).write_text(format_csv(rows), encoding="utf-8")


# ---------------------------------------------------------------------------
# alpha search and single-model equivalence


@dataclass(frozen=True)
class AlphaRow:
    alpha: float
    natural_acc: float
    adversarial_acc: float
    margin: float


@dataclass(frozen=True)
class AlphaSearchResult:
    alpha_star: float
    feasible: bool
    reference_natural_acc: float
    reference_adversarial_acc: float
    rows: tuple[AlphaRow, ...]
    members: tuple = field(default=(), repr=False)

    @property
    def selected(self) -> AlphaRow:
        return next(r for r in self.rows if r.alpha == self.alpha_star)


def min_alpha_search(
    train: Dataset,
    val: Dataset,
    arch: Architecture,
    k: int,
    eps_target: float,
    reference: ModelParams,
    alpha_grid: Sequence[float],
    train_cfg: TrainConfig,
    attack_cfg: AttackConfig,
    base_seed: int,
    workers: int = 1,
) -> AlphaSearchResult:
    """Smallest training radius whose uniform K-ensemble matches the reference.

    Every grid radius is trained and scored on ``val``. The constraint is
    ensemble adversarial accuracy at ``eps_target`` >= the reference's. If no
    radius satisfies it, the radius with the largest margin is returned and
    ``feasible`` is False.
    """
    grid = [float(a) for a in alpha_grid]
    if not grid:
        raise ContractError("alpha grid is empty")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ContractError(f"alpha grid must strictly increase: {grid}")
    if grid[0] <= 0 or grid[-1] > eps_target:
        raise ContractError(f"alpha grid must lie in (0, {eps_target}]: {grid}")
    ref_adv = adversarial_accuracy(reference, val, eps_target, attack_cfg)
    ref_nat = natural_accuracy(reference, val)
    rows, members = [], []
    for alpha in grid:
        trained = train_ensemble_members(train, arch, train_cfg.at_epsilon(alpha), base_seed, k, workers)
        ens = uniform_ensemble(trained)
        adv = adversarial_accuracy(ens, val, eps_target, attack_cfg)
        rows.append(AlphaRow(alpha, natural_accuracy(ens, val), adv, adv - ref_adv))
        members.append(tuple(trained))
    feasible = [r for r in rows if r.margin >= 0]
    if feasible:
        star, ok = feasible[0].alpha, True
    else:
        star, ok = max(rows, key=lambda r: r.margin).alpha, False
    return AlphaSearchResult(star, ok, ref_nat, ref_adv, tuple(rows), tuple(members))


@dataclass(frozen=True)
class EquivalenceResult:
    eps_eq: float
    matched: bool
    epsilons: tuple[float, ...]
    single: tuple[float, ...]
    ensemble: tuple[float, ...]


def equivalence_from_scores(epsilons, single, ensemble) -> tuple[float, bool]:
    """Largest radius with ``ensemble >= single``, interpolating the crossing.

    Returns ``(0.0, False)`` when the ensemble is below the family everywhere.
    """
    diff = np.asarray(ensemble, dtype=np.float64) - np.asarray(single, dtype=np.float64)
    ok = np.flatnonzero(diff >= 0)
    if ok.size == 0:
        return 0.0, False
    i = int(ok[-1])
    if i == len(epsilons) - 1:
        return float(epsilons[i]), True
    e0, e1, d0, d1 = epsilons[i], epsilons[i + 1], diff[i], diff[i + 1]
    return float(e0 + (e1 - e0) * d0 / (d0 - d1)), True


def equivalence_epsilon(ensemble, family: Sequence[ModelParams], data: Dataset, cfg: AttackConfig) -> EquivalenceResult:
    """Training radius of the single model whose self-evaluated accuracy the ensemble matches.

    ``family`` holds one model per training radius. Each is attacked at its
    own ``train_eps``, and the ensemble is attacked at the same radius.
    """
    family = sorted(family, key=lambda m: m.train_eps)
    if not family:
        raise ContractError("single-model family is empty")
    eps = [m.train_eps for m in family]
    if any(b <= a for a, b in zip(eps, eps[1:])):
        raise ContractError(f"family radii must be distinct: {eps}")
    single = [adversarial_accuracy(m, data, e, cfg) for m, e in zip(family, eps)]
    ens = [adversarial_accuracy(ensemble, data, e, cfg) for e in eps]
    eps_eq, matched = equivalence_from_scores(eps, single, ens)
    return EquivalenceResult(eps_eq, matched, tuple(eps), tuple(single), tuple(ens))
