"""Experiment orchestration: repeated seeded runs, reports and checkpoints.

Output layout under the output directory::

    run_000/report.csv      model_id,eps,acc,loss,auc_flag rows (test split)
    run_000/run.json        seeds, attack/train settings, validation metrics
    run_000/checkpoints/    one .ckpt per trained model
    ...
    summary.json            all runs plus the selected best run

Everything is staged in a sibling directory and moved into place only when
the whole experiment succeeds.
"""

from __future__ import annotations

import json
import logging
import shutil
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .attacks import AttackConfig
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .data import Dataset, gen_two_gaussians, load_cifar10_binary, load_idx, split
from .ensemble import EnsemblePredictor, composite_ensemble, uniform_ensemble
from .errors import ContractError
from .evaluation import (
    adversarial_accuracy,
    equivalence_epsilon,
    evaluate,
    format_csv,
    min_alpha_search,
    natural_accuracy,
)
from .models import Architecture, CompositeModel, make_composite
from .seeding import split_seed
from .training import TrainConfig, member_seeds, train_composite_head, train_ensemble_members, train_model

log = logging.getLogger(__name__)

# search rows report accuracy only
_NO_LOSS = float("nan")

SUBCOMMAND_MODES = {
    "train": ("natural", "robust", "ensemble", "composite", "composite_ensemble"),
    "eval": ("curve",),
    "curve": ("curve",),
    "alpha-search": ("alpha_search",),
    "equivalence": ("equivalence",),
}


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.dataset == "gaussians":
        return gen_two_gaussians(cfg.n, cfg.dim, cfg.margin, cfg.sigma, seed=cfg.data_seed)
    if cfg.dataset == "cifar10":
        parts = [load_cifar10_binary(cfg.resolve(p)) for p in cfg.data_path]
        if len(parts) == 1:
            return parts[0]
        return Dataset(
            np.concatenate([p.inputs for p in parts]),
            np.concatenate([p.labels for p in parts]),
            10,
            name="cifar10",
            source_checksum=",".join(p.source_checksum for p in parts),
        )
    return load_idx(cfg.resolve(cfg.images_path), cfg.resolve(cfg.labels_path))


def train_config(cfg: ExperimentConfig, epsilon: float) -> TrainConfig:
    attack = AttackConfig(
        epsilon=float(epsilon),
        steps=cfg.train_steps,
        restarts=cfg.train_restarts,
        random_start=cfg.random_start,
        seed=cfg.data_seed,
        clip=(0.0, 1.0) if cfg.clip else None,
    )
    return TrainConfig(cfg.epochs, cfg.batch_size, cfg.lr, cfg.momentum, attack, cfg.data_seed)


def eval_config(cfg: ExperimentConfig, seed: int) -> AttackConfig:
    return AttackConfig(
        steps=cfg.eval_steps,
        restarts=cfg.eval_restarts,
        random_start=cfg.random_start,
        zero_start=True,
        seed=seed,
        clip=(0.0, 1.0) if cfg.clip else None,
    )


def _fmt(x: float) -> str:
    return f"{x:g}"


class _Run:
    """One seeded repetition; writes its files under ``run_dir``."""

    def __init__(self, cfg: ExperimentConfig, index: int, run_dir: Path, data):
        self.cfg = cfg
        self.index = index
        self.seed = split_seed(cfg.base_seed, index)
        self.dir = run_dir
        self.train, self.val, self.test = data
        self.ckpt_dir = run_dir / "checkpoints"
        self.ckpt_dir.mkdir(parents=True, exist_ok=True)
        self.checkpoints: dict[str, str] = {}
        self.rows: list = []
        self.extra: dict = {}
        self.attack = eval_config(cfg, split_seed(self.seed, 0xE7A1))

    @property
    def arch(self) -> Architecture:
        return Architecture(self.train.input_dim, self.cfg.hidden_dims, self.train.num_classes)

    def save(self, name: str, obj):
        self.checkpoints[name] = save_checkpoint(obj, self.ckpt_dir / f"{name}.ckpt")

    def train_single(self, name: str, epsilon: float, omega: int):
        model = train_model(self.train, self.arch, train_config(self.cfg, epsilon), omega)
        self.save(name, model)
        return model

    def train_members(self, prefix: str, epsilon: float, base: int, k: int):
        members = train_ensemble_members(
            self.train, self.arch, train_config(self.cfg, epsilon), base, k, workers=1
        )
        for j, m in enumerate(members, start=1):
            self.save(f"{prefix}_{j}", m)
        return members

    def train_composite(self, name: str, eps: float, alpha: float, base: int) -> CompositeModel:
        robust = train_model(self.train, self.arch, train_config(self.cfg, eps), split_seed(base, 1))
        natural = train_model(self.train, self.arch, train_config(self.cfg, alpha), split_seed(base, 2))
        comp = make_composite(robust, natural, split_seed(base, 3))
        comp = train_composite_head(comp, self.train, train_config(self.cfg, eps))
        self.save(name, comp)
        return comp

    def report(self, predictor, model_id: str, with_auc: bool = True):
        cfg = self.cfg
        target = cfg.eps_target if with_auc else None
        grid = cfg.grid()
        if target is not None and grid[-1] < target:
            raise ContractError(f"eps_grid ends at {grid[-1]} below eps_target {target}")
        rep = evaluate(predictor, self.test, grid, self.attack, model_id, eps_target=target,
                       seeds={"run_seed": self.seed})
        self.rows.extend(rep.csv_rows())
        return rep

    def validation(self, predictor) -> dict:
        out = {"natural_acc": natural_accuracy(predictor, self.val)}
        if self.cfg.eps_target is not None:
            out["adversarial_acc"] = adversarial_accuracy(predictor, self.val, self.cfg.eps_target, self.attack)
        return out

    # -- modes -------------------------------------------------------------

    def execute(self) -> dict:
        cfg = self.cfg
        mode = cfg.mode
        tag = f"s{self.seed}"
        if mode == "natural":
            predictor = self.train_single("natural", 0.0, split_seed(self.seed, 1))
            self.report(predictor, f"natural_{tag}")
        elif mode == "robust":
            a = cfg.alpha_value
            predictor = self.train_single("robust", a, split_seed(self.seed, 1))
            self.report(predictor, f"robust_a{_fmt(a)}_{tag}")
        elif mode == "ensemble":
            a = cfg.alpha_value
            members = self.train_members("member", a, self.seed, cfg.K)
            predictor = EnsemblePredictor(members, cfg.weights or [1.0 / cfg.K] * cfg.K, cfg.combine)
            self.report(predictor, f"ensemble_k{cfg.K}_a{_fmt(a)}_{tag}")
        elif mode in ("composite", "composite_ensemble"):
            k = 1 if mode == "composite" else cfg.K
            eps = list(cfg.eps) if mode == "composite" else cfg.per_member(cfg.eps, "eps")
            alpha = list(cfg.alpha) if mode == "composite" else cfg.per_member(cfg.alpha, "alpha")
            comps = [
                self.train_composite(f"composite_{j + 1}", eps[j], alpha[j], split_seed(self.seed, 100 + j))
                for j in range(k)
            ]
            if mode == "composite":
                predictor = comps[0]
                self.report(predictor, f"composite_e{_fmt(eps[0])}_a{_fmt(alpha[0])}_{tag}")
            else:
                predictor = composite_ensemble(comps, cfg.weights, cfg.combine)
                self.report(predictor, f"composite_ensemble_k{k}_{tag}")
        elif mode == "alpha_search":
            predictor = self._alpha_search(tag)
        elif mode == "equivalence":
            predictor = self._equivalence(tag)
        elif mode == "curve":
            predictor = load_checkpoint(cfg.resolve(cfg.checkpoint))
            self.report(predictor, f"{Path(cfg.checkpoint).stem}_{tag}", with_auc=self.extra.get("auc", True))
        else:  # pragma: no cover - guarded by the config parser
            raise ContractError(f"unknown mode {mode}")
        return self.validation(predictor)

    def _alpha_search(self, tag):
        cfg = self.cfg
        target = cfg.eps_target
        ref_seed = member_seeds(split_seed(self.seed, 7), 1)[0]
        reference = self.train_single("reference", target, ref_seed)
        result = min_alpha_search(
            self.train, self.val, self.arch, cfg.K, target, reference, cfg.alpha_grid,
            train_config(cfg, 0.0), self.attack, self.seed,
        )
        for alpha, members in zip(cfg.alpha_grid, result.members):
            for j, m in enumerate(members, start=1):
                self.save(f"alpha{_fmt(alpha)}_member_{j}", m)
        self.rows.append((f"reference_e{_fmt(target)}_{tag}", 0.0, result.reference_natural_acc, _NO_LOSS, 0))
        self.rows.append((f"reference_e{_fmt(target)}_{tag}", target, result.reference_adversarial_acc, _NO_LOSS, 0))
        for r in result.rows:
            mid = f"ensemble_k{cfg.K}_a{_fmt(r.alpha)}_{tag}"
            self.rows.append((mid, 0.0, r.natural_acc, _NO_LOSS, 0))
            self.rows.append((mid, target, r.adversarial_acc, _NO_LOSS, 0))
        self.extra["alpha_search"] = {
            "alpha_star": result.alpha_star,
            "feasible": result.feasible,
            "reference_natural_acc": result.reference_natural_acc,
            "reference_adversarial_acc": result.reference_adversarial_acc,
            "rows": [asdict(r) for r in result.rows],
        }
        chosen = cfg.alpha_grid.index(result.alpha_star)
        return uniform_ensemble(result.members[chosen])

    def _equivalence(self, tag):
        cfg = self.cfg
        family = [
            self.train_single(f"family_e{_fmt(e)}", e, split_seed(self.seed, 200 + i))
            for i, e in enumerate(cfg.family_eps)
        ]
        members = self.train_members("member", cfg.alpha_value, self.seed, cfg.K)
        ens = uniform_ensemble(members, combine=cfg.combine)
        result = equivalence_epsilon(ens, family, self.test, self.attack)
        ens_id = f"ensemble_k{cfg.K}_a{_fmt(cfg.alpha_value)}_{tag}"
        for e, s, g in zip(result.epsilons, result.single, result.ensemble):
            self.rows.append((f"single_e{_fmt(e)}_{tag}", e, s, _NO_LOSS, 0))
            self.rows.append((ens_id, e, g, _NO_LOSS, 0))
        self.extra["equivalence"] = {
            "eps_eq": result.eps_eq,
            "matched": result.matched,
            "epsilons": list(result.epsilons),
            "single": list(result.single),
            "ensemble": list(result.ensemble),
        }
        return ens


def _run_job(args) -> dict:
    cfg, index, run_dir, data, subcommand = args
    run = _Run(cfg, index, run_dir, data)
    if subcommand == "eval":
        run.extra["auc"] = False
    val = run.execute()
    (run_dir / "report.csv").write_text(format_csv(run.rows), encoding="utf-8")
    record = {
        "run": index,
        "run_seed": run.seed,
        "mode": cfg.mode,
        "attack": asdict(run.attack),
        "attack_id": run.attack.describe(),
        "train": {k: v for k, v in asdict(train_config(cfg, 0.0)).items() if k != "train_attack"},
        "validation": val,
        "checkpoints": run.checkpoints,
        **run.extra,
    }
    _write_json(run_dir / "run.json", record)
    return record


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def select_best(records: list[dict], floor: float) -> int | None:
    """Highest validation natural accuracy among runs meeting the adversarial floor."""
    best = None
    for r in records:
        v = r["validation"]
        if v.get("adversarial_acc", 1.0) < floor:
            continue
        if best is None or v["natural_acc"] > records[best]["validation"]["natural_acc"]:
            best = records.index(r)
    return best


def run_experiment(cfg: ExperimentConfig, out_dir=None, subcommand: str = "train") -> Path:
    """Execute ``cfg.run_count`` runs and write all reports into ``out_dir``."""
    allowed = SUBCOMMAND_MODES.get(subcommand)
    if allowed is None:
        raise ContractError(f"unknown subcommand {subcommand!r}")
    if cfg.mode not in allowed:
        raise ContractError(f"subcommand {subcommand!r} runs modes {allowed}, config has {cfg.mode!r}")
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    out.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=f".{out.name}.partial-", dir=out.parent))
    try:
        dataset = load_dataset(cfg)
        data = split(dataset, cfg.split, seed=cfg.data_seed)
        jobs = [(cfg, i, stage / f"run_{i:03d}", data, subcommand) for i in range(cfg.run_count)]
        if cfg.workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
                records = list(pool.map(_run_job, jobs))
        else:
            records = [_run_job(j) for j in jobs]
        best = select_best(records, cfg.adv_floor)
        summary = {
            "config": cfg.as_dict(),
            "dataset": {"name": dataset.name, "size": len(dataset), "checksum": dataset.checksum()},
            "runs": [{"run": r["run"], "run_seed": r["run_seed"], "validation": r["validation"]} for r in records],
            "best_run": best,
            "selection": f"max validation natural_acc s.t. adversarial_acc@eps_target >= {cfg.adv_floor}",
        }
        _write_json(stage / "summary.json", summary)
        out.mkdir(parents=True, exist_ok=True)
        for item in sorted(stage.iterdir()):
            target = out / item.name
            if target.is_dir():
                shutil.rmtree(target)
            elif target.exists():
                target.unlink()
            shutil.move(str(item), str(target))
    finally:
        shutil.rmtree(stage, ignore_errors=True)
    return out
