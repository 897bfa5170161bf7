"""Datasets: CIFAR-10 binary and IDX loaders, a synthetic two-Gaussian
generator, and seeded train/val/test splits.

Inputs are flattened float64 rows in ``[0, 1]``; perturbation radii are
measured in that normalised space.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError
from .seeding import rng_for

CIFAR_RECORD = 3073
CIFAR_PIXELS = 3072
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable labelled examples.

    ``transform`` is ``(scale, offset)`` of the affine map from raw to
    normalised coordinates when the data were generated (``x = scale*z + offset``).
    """

    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"
    source_checksum: str | None = None
    transform: tuple[float, float] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        x = np.array(self.inputs, dtype=np.float64)
        y = np.array(self.labels, dtype=np.int64)
        if x.ndim != 2:
            raise ContractError(f"inputs must be a [N, d] array, got shape {x.shape}")
        if y.shape != (x.shape[0],):
            raise ContractError(f"{x.shape[0]} inputs but labels of shape {y.shape}")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ContractError(f"labels must lie in [0, {self.num_classes})")
        if x.size and (x.min() < 0.0 or x.max() > 1.0):
            raise ContractError("input values must lie in [0, 1]")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return len(self.labels)

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, index, name: str | None = None) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(
            self.inputs[index],
            self.labels[index],
            self.num_classes,
            name=name or self.name,
            source_checksum=self.source_checksum,
            transform=self.transform,
            meta=dict(self.meta),
        )

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(self.inputs.astype("<f8").tobytes())
        h.update(self.labels.astype("<i8").tobytes())
        return h.hexdigest()


def _read(path) -> bytes:
    return Path(path).read_bytes()


def load_cifar10_binary(path) -> Dataset:
    """Read one CIFAR-10 binary batch: 3073-byte records, label byte first."""
    raw = _read(path)
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        expected = max(1, math.ceil(len(raw) / CIFAR_RECORD)) * CIFAR_RECORD
        raise FormatError(
            f"{path}: size {len(raw)} bytes is not a multiple of the {CIFAR_RECORD}-byte record "
            f"(expected e.g. {expected})"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise FormatError(f"{path}: record {bad[0]} has label byte {labels[bad[0]]} > 9")
    inputs = records[:, 1:].astype(np.float64) / 255.0
    return Dataset(
        inputs, labels, 10, name=Path(path).name, source_checksum=hashlib.sha256(raw).hexdigest()
    )


def _idx_header(raw: bytes, magic: int, path) -> tuple[int, ...]:
    if len(raw) < 4:
        raise FormatError(f"{path}: too short for an IDX header")
    got = int.from_bytes(raw[:4], "big")
    if got != magic:
        raise FormatError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = raw[3]
    if len(raw) < 4 + 4 * ndim:
        raise FormatError(f"{path}: truncated dimension fields")
    dims = tuple(int.from_bytes(raw[4 + 4 * i: 8 + 4 * i], "big") for i in range(ndim))
    body = len(raw) - 4 - 4 * ndim
    if body != math.prod(dims):
        raise FormatError(f"{path}: header declares {math.prod(dims)} data bytes, found {body}")
    return dims


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Read an IDX image/label file pair (unsigned-byte data, big-endian dims)."""
    img_raw, lab_raw = _read(images_path), _read(labels_path)
    img_dims = _idx_header(img_raw, IDX_IMAGES_MAGIC, images_path)
    lab_dims = _idx_header(lab_raw, IDX_LABELS_MAGIC, labels_path)
    if img_dims[0] != lab_dims[0]:
        raise FormatError(f"{img_dims[0]} images but {lab_dims[0]} labels")
    n = img_dims[0]
    pixels = np.frombuffer(img_raw, dtype=np.uint8, offset=4 + 4 * len(img_dims))
    labels = np.frombuffer(lab_raw, dtype=np.uint8, offset=4 + 4 * len(lab_dims)).astype(np.int64)
    if num_classes is None:
        num_classes = max(2, int(labels.max()) + 1) if n else 2
    digest = hashlib.sha256(img_raw + lab_raw).hexdigest()
    return Dataset(
        pixels.reshape(n, -1).astype(np.float64) / 255.0,
        labels,
        num_classes,
        name=Path(images_path).name,
        source_checksum=digest,
    )


def gen_two_gaussians(
    n: int, dim: int, margin: float, sigma: float = 1.0, seed: int = 0, clip_sigmas: float = 5.0
) -> Dataset:
    """Two isotropic Gaussians at ``-/+ (margin/2) e_1`` (labels 0 and 1).

    Raw coordinates are clipped to ``[-L, L]`` with
    ``L = margin/2 + clip_sigmas*sigma`` and mapped affinely onto ``[0, 1]``.
    ``meta`` records the class margin and noise scale in normalised units.
    """
    if n < 2 or n % 2:
        raise ContractError(f"n must be a positive even number, got {n}")
    if dim < 2:
        raise ContractError(f"dim must be >= 2, got {dim}")
    if not margin > 0 or not sigma > 0:
        raise ContractError("margin and sigma must be positive")
    rng = rng_for(seed)
    half = n // 2
    labels = np.repeat([0, 1], half)
    z = sigma * rng.standard_normal((n, dim))
    z[:, 0] += np.where(labels == 0, -margin / 2, margin / 2)
    order = rng.permutation(n)
    z, labels = z[order], labels[order]
    bound = margin / 2 + clip_sigmas * sigma
    scale = 1.0 / (2.0 * bound)
    x = np.clip(z, -bound, bound) * scale + 0.5
    x = np.clip(x, 0.0, 1.0)
    meta = {"margin": margin * scale, "sigma": sigma * scale, "raw_margin": margin, "raw_sigma": sigma}
    return Dataset(
        x, labels, 2, name=f"two_gaussians(n={n},dim={dim},seed={seed})", transform=(scale, 0.5), meta=meta
    )


def denormalize(data: Dataset) -> np.ndarray:
    """Inputs mapped back to raw (clipped) generator coordinates."""
    if data.transform is None:
        raise ContractError(f"{data.name} carries no normalisation transform")
    scale, offset = data.transform
    return (data.inputs - offset) / scale


def split(data: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Seeded shuffle, then floor-sized val/test blocks; the remainder goes to train."""
    f = [float(v) for v in fractions]
    if len(f) != 3 or any(v < 0 for v in f) or abs(sum(f) - 1.0) > 1e-9:
        raise ContractError(f"split fractions must be 3 non-negative numbers summing to 1, got {fractions}")
    n = len(data)
    counts = [math.floor(n * v + 1e-9) for v in f]
    for name, v, c in zip(("train", "val", "test"), f, counts):
        if v > 0 and c == 0:
            raise ContractError(f"{name} fraction {v} leaves no examples out of {n}")
    counts[0] = n - counts[1] - counts[2]
    perm = rng_for(seed).permutation(n)
    a, b = counts[0], counts[0] + counts[1]
    return (
        data.subset(perm[:a], f"{data.name}/train"),
        data.subset(perm[a:b], f"{data.name}/val"),
        data.subset(perm[b:], f"{data.name}/test"),
    )
