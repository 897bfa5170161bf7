"""Flat ``key = value`` experiment configs.

One assignment per line, ``#`` starts a comment, list values are
comma-separated. Unknown keys, duplicate keys and malformed values are
errors that cite the line number. Keys that only matter to other modes
are accepted with a logged warning.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError

log = logging.getLogger(__name__)

MODES = (
    "natural",
    "robust",
    "ensemble",
    "composite",
    "composite_ensemble",
    "alpha_search",
    "equivalence",
    "curve",
)
DATASETS = ("gaussians", "cifar10", "idx")


def _int(text):
    return int(text, 0)


def _float(text):
    value = float(text)
    if value != value or value in (float("inf"), float("-inf")):
        raise ValueError(f"{text!r} is not a finite number")
    return value


def _bool(text):
    lowered = text.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"{text!r} is not a boolean")


def _list(item):
    def parse(text):
        parts = [p.strip() for p in text.split(",")]
        if any(not p for p in parts):
            raise ValueError(f"empty entry in list {text!r}")
        return tuple(item(p) for p in parts)

    return parse


def _str(text):
    return text


# key -> parser; every key is also a field of ExperimentConfig
PARSERS = {
    "mode": _str,
    "dataset": _str,
    "data_path": _list(_str),
    "images_path": _str,
    "labels_path": _str,
    "n": _int,
    "dim": _int,
    "margin": _float,
    "sigma": _float,
    "data_seed": _int,
    "split": _list(_float),
    "hidden_dims": _list(_int),
    "epochs": _int,
    "batch_size": _int,
    "lr": _float,
    "momentum": _float,
    "train_steps": _int,
    "train_restarts": _int,
    "eval_steps": _int,
    "eval_restarts": _int,
    "random_start": _bool,
    "clip": _bool,
    "K": _int,
    "alpha": _list(_float),
    "eps": _list(_float),
    "eps_target": _float,
    "eps_grid": _list(_float),
    "alpha_grid": _list(_float),
    "family_eps": _list(_float),
    "weights": _list(_float),
    "combine": _str,
    "checkpoint": _str,
    "base_seed": _int,
    "run_count": _int,
    "adv_floor": _float,
    "workers": _int,
    "output_dir": _str,
}

REQUIRED = {
    "natural": (),
    "robust": ("alpha",),
    "ensemble": ("K", "alpha"),
    "composite": ("eps", "alpha"),
    "composite_ensemble": ("K", "eps", "alpha"),
    "alpha_search": ("K", "eps_target", "alpha_grid"),
    "equivalence": ("K", "alpha", "family_eps"),
    "curve": ("checkpoint",),
}
OPTIONAL = {
    "ensemble": ("weights", "combine"),
    "composite_ensemble": ("weights", "combine"),
    "equivalence": ("combine",),
}
MODE_KEYS = {"K", "alpha", "eps", "alpha_grid", "family_eps", "weights", "combine", "checkpoint"}


@dataclass
class ExperimentConfig:
    mode: str
    dataset: str = "gaussians"
    data_path: tuple[str, ...] = ()
    images_path: str | None = None
    labels_path: str | None = None
    n: int = 2000
    dim: int = 20
    margin: float = 4.0
    sigma: float = 1.0
    data_seed: int = 0
    split: tuple[float, ...] = (0.6, 0.2, 0.2)
    hidden_dims: tuple[int, ...] = (32,)
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    train_steps: int = 10
    train_restarts: int = 1
    eval_steps: int = 50
    eval_restarts: int = 3
    random_start: bool = True
    clip: bool = False
    K: int | None = None
    alpha: tuple[float, ...] | None = None
    eps: tuple[float, ...] | None = None
    eps_target: float | None = None
    eps_grid: tuple[float, ...] | None = None
    alpha_grid: tuple[float, ...] | None = None
    family_eps: tuple[float, ...] | None = None
    weights: tuple[float, ...] | None = None
    combine: str = "logits"
    checkpoint: str | None = None
    base_seed: int = 0
    run_count: int = 1
    adv_floor: float = 0.0
    workers: int = 1
    output_dir: str = "out"
    warnings: list[str] = field(default_factory=list, repr=False, compare=False)
    base_dir: Path | None = field(default=None, repr=False, compare=False)

    @property
    def alpha_value(self) -> float:
        return self.alpha[0]

    def per_member(self, values: tuple[float, ...], name: str) -> list[float]:
        """Broadcast a scalar-or-K list to one value per member."""
        if len(values) == 1:
            return list(values) * self.K
        if len(values) != self.K:
            raise ConfigError(f"{name} needs 1 or K={self.K} values, got {len(values)}")
        return list(values)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        if not p.is_absolute() and self.base_dir is not None:
            p = self.base_dir / p
        return p

    def grid(self) -> list[float]:
        if self.eps_grid is not None:
            return list(self.eps_grid)
        if self.eps_target is not None:
            from .evaluation import default_grid

            return default_grid(self.eps_target)
        return [0.0]

    def as_dict(self) -> dict:
        out = {}
        for f in fields(self):
            if f.name in ("warnings", "base_dir"):
                continue
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out


def parse_config(text: str, base_dir=None) -> ExperimentConfig:
    values: dict = {}
    lines: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in PARSERS:
            raise ConfigError(f"unknown key {key!r}", lineno)
        if key in values:
            raise ConfigError(f"duplicate key {key!r} (first set on line {lines[key]})", lineno)
        if not value:
            raise ConfigError(f"empty value for {key!r}", lineno)
        try:
            values[key] = PARSERS[key](value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", lineno) from None
        lines[key] = lineno

    mode = values.get("mode")
    if mode is None:
        raise ConfigError("missing required key 'mode'")
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}", lines["mode"])
    for key in REQUIRED[mode]:
        if key not in values:
            raise ConfigError(f"mode {mode!r} requires key {key!r}")
    cfg = ExperimentConfig(**values, base_dir=None if base_dir is None else Path(base_dir))
    relevant = set(REQUIRED[mode]) | set(OPTIONAL.get(mode, ()))
    for key in sorted(MODE_KEYS & set(values) - relevant):
        msg = f"line {lines[key]}: key {key!r} is ignored in mode {mode!r}"
        cfg.warnings.append(msg)
        log.warning(msg)
    _validate(cfg, lines)
    return cfg


def _validate(cfg: ExperimentConfig, lines: dict):
    def fail(msg, key=None):
        raise ConfigError(msg, lines.get(key))

    if cfg.dataset not in DATASETS:
        fail(f"unknown dataset {cfg.dataset!r}; expected one of {', '.join(DATASETS)}", "dataset")
    if cfg.dataset == "cifar10" and not cfg.data_path:
        fail("dataset 'cifar10' requires data_path")
    if cfg.dataset == "idx" and (cfg.images_path is None or cfg.labels_path is None):
        fail("dataset 'idx' requires images_path and labels_path")
    if len(cfg.split) != 3 or any(v < 0 for v in cfg.split) or abs(sum(cfg.split) - 1) > 1e-9:
        fail(f"split must be three non-negative fractions summing to 1, got {list(cfg.split)}", "split")
    for key in ("epochs", "batch_size", "train_steps", "train_restarts", "eval_steps", "eval_restarts",
                "run_count", "workers", "n", "dim"):
        minimum = 0 if key == "epochs" else 1
        if getattr(cfg, key) < minimum:
            fail(f"{key} must be >= {minimum}", key)
    if any(h < 1 for h in cfg.hidden_dims):
        fail("hidden_dims must be positive", "hidden_dims")
    if not cfg.lr > 0 or not 0 <= cfg.momentum < 1:
        fail("need lr > 0 and 0 <= momentum < 1", "lr" if not cfg.lr > 0 else "momentum")
    if cfg.K is not None and cfg.K < 1:
        fail("K must be >= 1", "K")
    if cfg.combine not in ("logits", "probs"):
        fail(f"combine must be 'logits' or 'probs', got {cfg.combine!r}", "combine")
    for key in ("alpha", "eps", "alpha_grid", "family_eps", "eps_grid"):
        v = getattr(cfg, key)
        if v is not None and any(x < 0 for x in v):
            fail(f"{key} values must be >= 0", key)
    if cfg.eps_target is not None and not cfg.eps_target > 0:
        fail("eps_target must be positive", "eps_target")
    if cfg.eps_grid is not None:
        g = cfg.eps_grid
        if any(b <= a for a, b in zip(g, g[1:])):
            fail("eps_grid must strictly increase", "eps_grid")

    mode = cfg.mode
    if mode in ("robust", "ensemble", "equivalence") and len(cfg.alpha) != 1:
        fail(f"mode {mode!r} takes a single alpha", "alpha")
    if mode in ("robust", "equivalence") and not cfg.alpha[0] > 0:
        fail("alpha must be positive for robust training", "alpha")
    if mode == "composite" and (len(cfg.eps) != 1 or len(cfg.alpha) != 1):
        fail("mode 'composite' takes a single eps and alpha")
    if mode in ("composite", "composite_ensemble"):
        if mode == "composite_ensemble":
            eps, alpha = cfg.per_member(cfg.eps, "eps"), cfg.per_member(cfg.alpha, "alpha")
        else:
            eps, alpha = list(cfg.eps), list(cfg.alpha)
        if any(not e > a for e, a in zip(eps, alpha)):
            fail("composite robust level eps must exceed the natural level alpha", "eps")
    if cfg.weights is not None and mode in ("ensemble", "composite_ensemble"):
        if len(cfg.weights) != cfg.K:
            fail(f"weights needs K={cfg.K} entries, got {len(cfg.weights)}", "weights")
    if mode == "alpha_search":
        g = cfg.alpha_grid
        if any(b <= a for a, b in zip(g, g[1:])) or g[0] <= 0 or g[-1] > cfg.eps_target:
            fail("alpha_grid must strictly increase within (0, eps_target]", "alpha_grid")
    if mode == "equivalence":
        g = cfg.family_eps
        if any(b <= a for a, b in zip(g, g[1:])) or g[0] <= 0:
            fail("family_eps must be positive and strictly increasing", "family_eps")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), base_dir=path.parent)
