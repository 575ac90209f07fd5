"""Long-tailed synthetic datasets, vector augmentations and the dataset file format."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

GROUPS = ("Frequent", "Medium", "Rare")

MAGIC = b"FASL"
FORMAT_VERSION = 1


class InvalidSpecError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 9
    max_count: int = 200
    imbalance_factor: float = 100.0
    input_dim: int = 16
    cluster_separation: float = 4.0
    cluster_noise: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if not math.isfinite(self.imbalance_factor) or self.imbalance_factor < 1:
            raise InvalidSpecError(f"imbalance factor must be finite and >= 1, got {self.imbalance_factor}")
        if self.num_classes < 3:
            raise InvalidSpecError("need at least 3 classes so every frequency group is nonempty")
        if self.max_count < 1 or self.input_dim < 1:
            raise InvalidSpecError("max_count and input_dim must be positive")
        if round(self.max_count / self.imbalance_factor) < 1:
            raise InvalidSpecError("max_count / imbalance_factor rounds to zero")
        if not (self.cluster_separation > 0 and self.cluster_noise > 0):
            raise InvalidSpecError("cluster_separation and cluster_noise must be positive")


@dataclass
class Dataset:
    samples: np.ndarray
    labels: np.ndarray
    per_class_counts: np.ndarray
    group_of_class: tuple[str, ...]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def num_classes(self) -> int:
        return len(self.per_class_counts)

    def unlabeled(self) -> "UnlabeledView":
        """Samples only; what the pretraining stages are allowed to see."""
        return UnlabeledView(self.samples)


@dataclass(frozen=True)
class UnlabeledView:
    samples: np.ndarray

    def __len__(self) -> int:
        return self.samples.shape[0]


@dataclass(frozen=True)
class AugmentConfig:
    noise_std: float = 0.1
    scale_jitter: float = 0.2
    mask_prob: float = 0.1

    def __post_init__(self):
        vals = (self.noise_std, self.scale_jitter, self.mask_prob)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidSpecError("augmentation parameters must be finite")
        if self.noise_std < 0 or not 0 <= self.scale_jitter < 1 or not 0 <= self.mask_prob < 1:
            raise InvalidSpecError("augmentation parameters out of range")
        if max(vals) <= 0:
            raise InvalidSpecError("at least one augmentation must be active")


def make_longtail_counts(num_classes: int, max_count: int, rho: float) -> list[int]:
    """Exponential profile ``max_count * rho**(-c / (C - 1))``, clamped at 1."""
    if not math.isfinite(rho) or num_classes < 1:
        raise InvalidSpecError("need finite rho and at least one class")
    if max_count < 1 or rho < 1:
        raise InvalidSpecError("max_count must be >= 1 and rho >= 1")
    if num_classes == 1:
        return [int(max_count)]
    return [
        max(1, int(round(max_count * rho ** (-c / (num_classes - 1)))))
        for c in range(num_classes)
    ]


def partition_groups(per_class_counts) -> tuple[str, ...]:
    """Split classes (sorted by count) into Frequent/Medium/Rare thirds.

    Remainder classes go to Frequent first, then Medium.
    """
    counts = np.asarray(per_class_counts)
    n = len(counts)
    if n < 3:
        raise InvalidSpecError("need at least 3 classes to form three groups")
    base, extra = divmod(n, 3)
    sizes = [base + (1 if g < extra else 0) for g in range(3)]
    # stable sort keeps class-index order among equal counts
    order = np.argsort(-counts, kind="stable")
    groups = [""] * n
    start = 0
    for g, size in enumerate(sizes):
        for c in order[start:start + size]:
            groups[int(c)] = GROUPS[g]
        start += size
    return tuple(groups)


def _class_means(spec: DatasetSpec, rng: np.random.Generator, max_tries: int = 1000) -> np.ndarray:
    # Random directions scaled so the expected pairwise distance is about
    # 1.5x the separation, then rejection on the minimum pairwise distance.
    radius = 1.5 * spec.cluster_separation / math.sqrt(2.0)
    for _ in range(max_tries):
        dirs = rng.standard_normal((spec.num_classes, spec.input_dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        means = radius * dirs
        diff = means[:, None, :] - means[None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1))
        dist[np.diag_indices(spec.num_classes)] = np.inf
        if dist.min() >= spec.cluster_separation:
            return means
    raise GenerationError(
        f"could not place {spec.num_classes} means {spec.cluster_separation} apart "
        f"in {spec.input_dim} dimensions after {max_tries} attempts"
    )


def synth_gaussian_mixture(spec: DatasetSpec, test_per_class: int = 0):
    """Long-tailed Gaussian mixture.

    With ``test_per_class > 0`` also returns a class-balanced test set drawn
    from the same class means, as ``(train, test)``.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    means = _class_means(spec, rng)
    counts = make_longtail_counts(spec.num_classes, spec.max_count, spec.imbalance_factor)
    train = _draw(means, counts, spec.cluster_noise, rng)
    if test_per_class <= 0:
        return train
    test = _draw(means, [test_per_class] * spec.num_classes, spec.cluster_noise, rng)
    test.group_of_class = train.group_of_class
    return train, test


def _draw(means, counts, noise, rng) -> Dataset:
    labels = np.repeat(np.arange(len(counts), dtype=np.int64), counts)
    samples = means[labels] + noise * rng.standard_normal((len(labels), means.shape[1]))
    samples = samples.astype(np.float32).astype(np.float64)  # float32-exact so files round-trip
    return Dataset(
        samples=samples,
        labels=labels,
        per_class_counts=np.asarray(counts, dtype=np.int64),
        group_of_class=partition_groups(counts) if len(counts) >= 3 else tuple(),
    )


def augment_view(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """One stochastic view: ``mask * (s * x + noise)``."""
    return augment_batch(np.asarray(x, dtype=np.float64)[None, :], cfg, rng)[0]


def augment_batch(X: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    n, d = X.shape
    s = rng.uniform(1.0 - cfg.scale_jitter, 1.0 + cfg.scale_jitter, size=(n, 1))
    out = s * X
    if cfg.noise_std > 0:
        out = out + cfg.noise_std * rng.standard_normal((n, d))
    if cfg.mask_prob > 0:
        out = out * (rng.random((n, d)) >= cfg.mask_prob)
    return out


def save_dataset(ds: Dataset, path) -> None:
    n, d = ds.samples.shape
    counts = np.asarray(ds.per_class_counts, dtype="<u8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQQQ", FORMAT_VERSION, n, d, len(counts)))
        fh.write(counts.tobytes())
        fh.write(np.asarray(ds.labels, dtype="<u4").tobytes())
        fh.write(np.ascontiguousarray(ds.samples, dtype="<f4").tobytes())


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    header = 4 + struct.calcsize("<IQQQ")
    if len(raw) < header or raw[:4] != MAGIC:
        raise FormatError("not a dataset file (bad magic or truncated header)")
    version, n, d, c = struct.unpack_from("<IQQQ", raw, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported dataset format version {version}")
    expected = header + 8 * c + 4 * n + 4 * n * d
    if len(raw) != expected:
        raise FormatError(f"file size {len(raw)} does not match header (expected {expected})")
    off = header
    counts = np.frombuffer(raw, dtype="<u8", count=c, offset=off).astype(np.int64)
    off += 8 * c
    labels = np.frombuffer(raw, dtype="<u4", count=n, offset=off).astype(np.int64)
    off += 4 * n
    samples = np.frombuffer(raw, dtype="<f4", count=n * d, offset=off).astype(np.float64).reshape(n, d)
    if counts.sum() != n:
        raise FormatError(f"per-class counts sum to {counts.sum()}, expected N={n}")
    if n and labels.max() >= c:
        raise FormatError("label out of range")
    if not np.array_equal(np.bincount(labels, minlength=c), counts):
        raise FormatError("labels disagree with per-class counts")
    return Dataset(samples, labels, counts, partition_groups(counts) if c >= 3 else tuple())
