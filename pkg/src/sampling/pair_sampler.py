"""
Pair Sampler Module
Draws example pairs (i, j) for augmentation and example batches for ERM steps
"""

from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Tuple

import numpy as np
from tenacity import Retrying, RetryError, retry_if_exception_type, stop_after_attempt

from src.utils.errors import ConfigError, SamplingError
from src.utils.logger import get_logger

logger = get_logger(__name__)

SAMPLER_STRATEGIES = ('selective', 'group_balanced', 'empirical', 'algorithm1_uniform')
MAX_EMPTY_GROUP_RETRIES = 1000


class _EmptyGroup(Exception):
    """Internal signal: the drawn (class, domain) cell has no examples"""


@dataclass(frozen=True)
class SamplerConfig:
    strategy: str = 'selective'
    seed: int = 0

    def validate(self) -> 'SamplerConfig':
        if self.strategy not in SAMPLER_STRATEGIES:
            raise ConfigError(f"unknown sampler strategy '{self.strategy}', "
                              f"expected one of {SAMPLER_STRATEGIES}")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


class GroupIndex:
    """Example ids grouped by (class, domain), by class and by domain"""

    def __init__(self, labels: np.ndarray, domains: np.ndarray, num_classes: int, num_domains: int):
        labels = np.asarray(labels, dtype=np.int64)
        domains = np.asarray(domains, dtype=np.int64)
        if labels.shape != domains.shape or labels.ndim != 1:
            raise ValueError("labels and domains must be 1-D arrays of equal length")
        if len(labels) and (labels.min() < 0 or labels.max() >= num_classes):
            raise ValueError(f"label out of range [0, {num_classes})")
        if len(domains) and (domains.min() < 0 or domains.max() >= num_domains):
            raise ValueError(f"domain out of range [0, {num_domains})")

        self.num_classes = int(num_classes)
        self.num_domains = int(num_domains)
        self.size = len(labels)
        self.labels = labels
        self.domains = domains

        self.groups: Dict[Tuple[int, int], np.ndarray] = {}
        self.counts = np.zeros((self.num_classes, self.num_domains), dtype=np.int64)
        for c in range(self.num_classes):
            for d in range(self.num_domains):
                members = np.flatnonzero((labels == c) & (domains == d))
                self.groups[(c, d)] = members
                self.counts[c, d] = len(members)
        self.by_class: List[np.ndarray] = [np.flatnonzero(labels == c) for c in range(self.num_classes)]
        self.by_domain: List[np.ndarray] = [np.flatnonzero(domains == d) for d in range(self.num_domains)]

    def group(self, c: int, d: int) -> np.ndarray:
        return self.groups[(c, d)]

    def imbalance_ratios(self) -> np.ndarray:
        """Per-domain largest / smallest nonzero class count"""
        ratios = np.full(self.num_domains, np.nan)
        for d in range(self.num_domains):
            nonzero = self.counts[:, d][self.counts[:, d] > 0]
            if len(nonzero):
                ratios[d] = nonzero.max() / nonzero.min()
        return ratios


class PairSampler:
    """Selective balanced sampling and its alternatives, with its own RNG"""

    def __init__(self, index: GroupIndex, config: SamplerConfig, rng: np.random.Generator):
        self.index = index
        self.config = config.validate()
        self.rng = rng
        self._check_preconditions()

    def _check_preconditions(self) -> None:
        idx = self.index
        if idx.size == 0:
            raise SamplingError("cannot sample from an empty dataset")
        if self.config.strategy == 'selective':
            empty_classes = [c for c, m in enumerate(idx.by_class) if len(m) == 0]
            empty_domains = [d for d, m in enumerate(idx.by_domain) if len(m) == 0]
            if empty_classes or empty_domains:
                raise SamplingError(f"selective sampling needs every class and domain populated; "
                                    f"empty classes {empty_classes}, empty domains {empty_domains}")

    def _uniform_member(self, members: np.ndarray) -> int:
        return int(members[self.rng.integers(len(members))])

    def _with_retries(self, draw) -> int:
        try:
            for attempt in Retrying(stop=stop_after_attempt(MAX_EMPTY_GROUP_RETRIES),
                                    retry=retry_if_exception_type(_EmptyGroup),
                                    reraise=False):
                with attempt:
                    return draw()
        except RetryError as e:
            raise SamplingError(f"{self.config.strategy}: no populated group after "
                                f"{MAX_EMPTY_GROUP_RETRIES} draws") from e
        raise SamplingError("sampler retry loop ended without a draw")

    def _draw_joint_cell(self) -> int:
        """Cell drawn as one flat index over C x D, rejected while empty"""
        def draw():
            cell = int(self.rng.integers(self.index.num_classes * self.index.num_domains))
            members = self.index.group(*divmod(cell, self.index.num_domains))
            if len(members) == 0:
                raise _EmptyGroup()
            return self._uniform_member(members)
        return self._with_retries(draw)

    def _draw_independent_coordinates(self) -> int:
        """Class and domain drawn independently, the pair rejected while empty"""
        def draw():
            c = int(self.rng.integers(self.index.num_classes))
            d = int(self.rng.integers(self.index.num_domains))
            members = self.index.group(c, d)
            if len(members) == 0:
                raise _EmptyGroup()
            return self._uniform_member(members)
        return self._with_retries(draw)

    def draw_pair(self) -> Tuple[int, int]:
        strategy = self.config.strategy
        idx = self.index
        if strategy == 'selective':
            i = self._uniform_member(idx.by_class[int(self.rng.integers(idx.num_classes))])
            j = self._uniform_member(idx.by_domain[int(self.rng.integers(idx.num_domains))])
        elif strategy == 'group_balanced':
            i = self._draw_joint_cell()
            j = self._draw_joint_cell()
        elif strategy == 'algorithm1_uniform':
            i = self._draw_independent_coordinates()
            j = self._draw_independent_coordinates()
        else:
            i = int(self.rng.integers(idx.size))
            j = int(self.rng.integers(idx.size))
        return i, j

    def draw_pairs(self, n: int) -> Tuple[np.ndarray, np.ndarray]:
        pairs = [self.draw_pair() for _ in range(n)]
        i_idx = np.array([p[0] for p in pairs], dtype=np.int64)
        j_idx = np.array([p[1] for p in pairs], dtype=np.int64)
        return i_idx, j_idx

    def draw_warmstart_batch(self, batch_size: int) -> np.ndarray:
        """Uniform over all examples, with replacement"""
        return draw_warmstart_batch(self.index, batch_size, self.rng)

    def draw_examples(self, batch_size: int) -> np.ndarray:
        """ERM batch under this sampler: group-balanced cells or the empirical distribution"""
        if self.config.strategy in ('group_balanced', 'algorithm1_uniform'):
            draw = (self._draw_joint_cell if self.config.strategy == 'group_balanced'
                    else self._draw_independent_coordinates)
            return np.array([draw() for _ in range(batch_size)], dtype=np.int64)
        if self.config.strategy == 'selective':
            idx = self.index
            return np.array([self._uniform_member(idx.by_class[int(self.rng.integers(idx.num_classes))])
                             for _ in range(batch_size)], dtype=np.int64)
        return self.draw_warmstart_batch(batch_size)


def draw_warmstart_batch(index: GroupIndex, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    if index.size == 0:
        raise SamplingError("cannot draw a batch from an empty dataset")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    return rng.integers(index.size, size=batch_size)
