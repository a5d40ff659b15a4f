"""
Synthetic Generator Module
Multi-domain long-tailed image datasets: class semantics live in spatial
patterns, domain nuisances live in per-channel first and second moments.
"""

from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed

from src.sampling.pair_sampler import GroupIndex
from src.utils.errors import ConfigError
from src.utils.logger import get_logger

logger = get_logger(__name__)

CORRELATION_MODES = ('cyclic_shift', 'independent')
DOMAIN_MODES = ('affine', 'warp')
SPLIT_CODES = {'train': 0, 'val': 1, 'test': 2}


@dataclass(frozen=True)
class DatasetSpec:
    """Parameters of one synthetic multi-domain long-tailed dataset"""

    num_classes: int = 10
    num_domains: int = 4
    image_side: int = 16
    channels: int = 3
    imbalance_ratio: float = 50.0
    head_count: int = 500
    correlation_mode: str = 'cyclic_shift'
    domain_mode: str = 'affine'
    noise_std: float = 0.1
    val_per_cell: int = 10
    test_per_cell: int = 20
    seed: int = 0

    def validate(self) -> 'DatasetSpec':
        if self.num_classes < 2 or self.num_domains < 2:
            raise ConfigError("dataset needs at least 2 classes and 2 domains")
        if self.imbalance_ratio < 1.0:
            raise ConfigError(f"imbalance_ratio must be >= 1, got {self.imbalance_ratio}")
        if self.head_count < self.num_classes:
            raise ConfigError(f"head_count ({self.head_count}) must be >= num_classes ({self.num_classes})")
        if self.image_side < 2 or self.channels < 1:
            raise ConfigError("image_side must be >= 2 and channels >= 1")
        if self.correlation_mode not in CORRELATION_MODES:
            raise ConfigError(f"unknown correlation_mode '{self.correlation_mode}'")
        if self.domain_mode not in DOMAIN_MODES:
            raise ConfigError(f"unknown domain_mode '{self.domain_mode}'")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if self.val_per_cell < 0 or self.test_per_cell < 1:
            raise ConfigError("val_per_cell must be >= 0 and test_per_cell >= 1")
        return self

    @property
    def pixels(self) -> int:
        return self.channels * self.image_side * self.image_side

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'DatasetSpec':
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__ and v is not None}
        try:
            for name in ('num_classes', 'num_domains', 'image_side', 'channels', 'head_count',
                         'val_per_cell', 'test_per_cell', 'seed'):
                if name in known:
                    known[name] = int(known[name])
            for name in ('imbalance_ratio', 'noise_std'):
                if name in known:
                    known[name] = float(known[name])
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid dataset value: {e}") from e
        return cls(**known).validate()


@dataclass
class Dataset:
    """Labelled, domain-tagged images; domain_ids maps local domain ids to generator ids"""

    x: np.ndarray
    y: np.ndarray
    d: np.ndarray
    num_classes: int
    num_domains: int
    domain_ids: Tuple[int, ...] = field(default=())

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.d = np.asarray(self.d, dtype=np.int64)
        if not self.domain_ids:
            self.domain_ids = tuple(range(self.num_domains))
        self.domain_ids = tuple(int(v) for v in self.domain_ids)
        if len(self.domain_ids) != self.num_domains:
            raise ValueError("domain_ids must name every local domain")
        if not (len(self.x) == len(self.y) == len(self.d)):
            raise ValueError("x, y and d must have equal length")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError("class label out of range")
        if len(self.d) and (self.d.min() < 0 or self.d.max() >= self.num_domains):
            raise ValueError("domain id out of range")

    def __len__(self) -> int:
        return len(self.y)

    def counts(self) -> np.ndarray:
        """Examples per (class, domain) cell, shape [C, D]"""
        counts = np.zeros((self.num_classes, self.num_domains), dtype=np.int64)
        np.add.at(counts, (self.y, self.d), 1)
        return counts

    def class_counts(self) -> np.ndarray:
        return self.counts().sum(axis=1)

    def measured_imbalance(self) -> np.ndarray:
        """Largest over smallest nonzero class count per domain"""
        return self.group_index().imbalance_ratios()

    def group_index(self) -> GroupIndex:
        return GroupIndex(self.y, self.d, self.num_classes, self.num_domains)

    def subset(self, indices: Sequence[int]) -> 'Dataset':
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.x[indices], self.y[indices], self.d[indices],
                       self.num_classes, self.num_domains, self.domain_ids)

    def is_balanced(self) -> bool:
        """Equal count in every (class, domain) cell"""
        counts = self.counts()
        return bool(counts.min() == counts.max() and counts.min() > 0)


@dataclass
class DatasetSplits:
    spec: DatasetSpec
    train: Dataset
    val: Dataset
    test: Dataset

    def items(self):
        return (('train', self.train), ('val', self.val), ('test', self.test))


def class_counts(num_classes: int, imbalance_ratio: float, head_count: int) -> np.ndarray:
    """Exponential profile n_k = round(n_max * rho^(-k / (C - 1))) by rank k, clamped >= 1"""
    if num_classes < 2:
        raise ConfigError("class_counts needs at least 2 classes")
    if imbalance_ratio < 1.0:
        raise ConfigError("imbalance_ratio must be >= 1")
    if head_count < num_classes:
        raise ConfigError("head_count must be >= num_classes")
    ranks = np.arange(num_classes)
    counts = np.rint(head_count * imbalance_ratio ** (-ranks / (num_classes - 1)))
    return np.maximum(counts, 1).astype(np.int64)


def class_ranking(spec: DatasetSpec, domain: int) -> np.ndarray:
    """Class id at each count rank (rank 0 = head class) inside one domain"""
    base = np.arange(spec.num_classes)
    if spec.correlation_mode == 'independent':
        return base
    shift = domain * (spec.num_classes // spec.num_domains)
    return (base + shift) % spec.num_classes


def domain_counts(spec: DatasetSpec) -> np.ndarray:
    """Training counts per (class, domain), shape [C, D]"""
    profile = class_counts(spec.num_classes, spec.imbalance_ratio, spec.head_count)
    counts = np.zeros((spec.num_classes, spec.num_domains), dtype=np.int64)
    for d in range(spec.num_domains):
        counts[class_ranking(spec, d), d] = profile
    return counts


def class_template(spec: DatasetSpec, c: int) -> np.ndarray:
    """Blob at a class-indexed position on a circle plus a bar at angle pi * c / C"""
    side = spec.image_side
    grid = np.arange(side) - (side - 1) / 2.0
    yy, xx = np.meshgrid(grid, grid, indexing='ij')

    angle = 2.0 * np.pi * c / spec.num_classes
    radius = 0.3 * side
    cy, cx = radius * np.sin(angle), radius * np.cos(angle)
    blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * (side / 8.0) ** 2))

    theta = np.pi * c / spec.num_classes
    distance = np.abs(-np.sin(theta) * xx + np.cos(theta) * yy)
    along = np.abs(np.cos(theta) * xx + np.sin(theta) * yy)
    bar = np.exp(-distance ** 2 / (2.0 * (side / 16.0) ** 2)) * (along <= 0.35 * side)

    pattern = blob + 0.5 * bar
    return np.repeat(pattern[np.newaxis], spec.channels, axis=0)


def domain_transform(spec: DatasetSpec, d: int) -> Tuple[np.ndarray, np.ndarray]:
    """Per-channel gain and bias of domain d; fixed, positive gains, separated across domains"""
    if spec.domain_mode == 'warp':
        return np.ones(spec.channels), np.zeros(spec.channels)
    gain_levels = np.linspace(0.5, 2.0, spec.num_domains)
    bias_levels = np.linspace(-1.0, 1.0, spec.num_domains)
    channels = np.arange(spec.channels)
    gains = gain_levels[(d + channels) % spec.num_domains]
    biases = bias_levels[(spec.num_domains - 1 - d + channels) % spec.num_domains]
    return gains, biases


def render(template: np.ndarray, gain, bias, shift: int = 0) -> np.ndarray:
    """gain * template + bias per channel, optionally rolled spatially by `shift` pixels"""
    gain = np.broadcast_to(np.asarray(gain, dtype=np.float64), (template.shape[0],))
    bias = np.broadcast_to(np.asarray(bias, dtype=np.float64), (template.shape[0],))
    image = gain[:, None, None] * template + bias[:, None, None]
    if shift:
        image = np.roll(image, shift=(shift, 2 * shift), axis=(1, 2))
    return image


def _generate_domain(spec: DatasetSpec, split: str, d: int, per_class: np.ndarray,
                     templates: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([spec.seed, SPLIT_CODES[split], d])
    gains, biases = domain_transform(spec, d)
    shift = d if spec.domain_mode == 'warp' else 0
    images, labels = [], []
    for c in range(spec.num_classes):
        n = int(per_class[c])
        if n == 0:
            continue
        clean = render(templates[c], gains, biases, shift)
        noise = rng.normal(0.0, spec.noise_std, size=(n,) + clean.shape) if spec.noise_std > 0 \
            else np.zeros((n,) + clean.shape)
        images.append(clean[np.newaxis] + noise)
        labels.append(np.full(n, c, dtype=np.int64))
    if not images:
        side = spec.image_side
        return np.zeros((0, spec.channels, side, side)), np.zeros(0, dtype=np.int64)
    return np.concatenate(images), np.concatenate(labels)


def _generate_split(spec: DatasetSpec, split: str, counts: np.ndarray, templates: np.ndarray,
                    n_jobs: int = 1) -> Dataset:
    parts = Parallel(n_jobs=n_jobs)(
        delayed(_generate_domain)(spec, split, d, counts[:, d], templates)
        for d in range(spec.num_domains))
    x = np.concatenate([p[0] for p in parts])
    y = np.concatenate([p[1] for p in parts])
    d = np.concatenate([np.full(len(p[1]), k, dtype=np.int64) for k, p in enumerate(parts)])
    return Dataset(x, y, d, spec.num_classes, spec.num_domains)


def generate(spec: DatasetSpec, n_jobs: int = 1) -> DatasetSplits:
    """Long-tailed train split plus class- and domain-balanced val and test splits"""
    spec = spec.validate()
    templates = np.stack([class_template(spec, c) for c in range(spec.num_classes)])
    shape = (spec.num_classes, spec.num_domains)

    train = _generate_split(spec, 'train', domain_counts(spec), templates, n_jobs)
    val = _generate_split(spec, 'val', np.full(shape, spec.val_per_cell), templates, n_jobs)
    test = _generate_split(spec, 'test', np.full(shape, spec.test_per_cell), templates, n_jobs)

    logger.info(f"Generated {len(train)} train / {len(val)} val / {len(test)} test examples "
                f"(C={spec.num_classes}, D={spec.num_domains}, rho={spec.imbalance_ratio}, "
                f"{spec.correlation_mode}, {spec.domain_mode})")
    return DatasetSplits(spec=spec, train=train, val=val, test=test)


def leave_one_domain_out(dataset: Dataset, held_out: int,
                         test_pool: Optional[Dataset] = None) -> Tuple[Dataset, Dataset]:
    """Train on every other domain, test on a class-balanced set from the held-out one

    The remaining training domains are renumbered 0..D-2; `domain_ids` keeps the
    original ids. Without a test pool, the held-out domain's own examples are cut
    down to the smallest class count so every class appears equally often.
    """
    if dataset.num_domains < 2:
        raise ConfigError("leave-one-domain-out needs at least 2 domains")
    if not 0 <= held_out < dataset.num_domains:
        raise ConfigError(f"held-out domain {held_out} out of range [0, {dataset.num_domains})")

    kept = [k for k in range(dataset.num_domains) if k != held_out]
    remap = np.full(dataset.num_domains, -1, dtype=np.int64)
    remap[kept] = np.arange(len(kept))
    train_mask = dataset.d != held_out
    train = Dataset(dataset.x[train_mask], dataset.y[train_mask], remap[dataset.d[train_mask]],
                    dataset.num_classes, len(kept),
                    tuple(dataset.domain_ids[k] for k in kept))

    pool = test_pool if test_pool is not None else dataset
    pool_ids = np.flatnonzero(pool.d == held_out)
    if test_pool is None:
        per_class = [pool_ids[pool.y[pool_ids] == c] for c in range(pool.num_classes)]
        take = min(len(ids) for ids in per_class)
        if take == 0:
            raise ValueError(f"held-out domain {held_out} lacks some classes; cannot balance its test set")
        pool_ids = np.sort(np.concatenate([ids[:take] for ids in per_class]))
    test = Dataset(pool.x[pool_ids], pool.y[pool_ids], np.zeros(len(pool_ids), dtype=np.int64),
                   pool.num_classes, 1, (pool.domain_ids[held_out],))
    return train, test
