"""
Prototype Bank Module
Momentum-updated class prototypes r_c (averaged over all domains) and
class-agnostic domain statistics (u_d, v_d) (averaged over all classes).
"""

from typing import Any, Dict, List, Tuple

import numpy as np

from src.augmentation.feature_augmenter import Decomposition
from src.utils.errors import BankError, ConfigError
from src.utils.logger import get_logger

logger = get_logger(__name__)


class PrototypeBank:
    """EMA prototypes with per-epoch streaming estimates"""

    def __init__(self, num_classes: int, num_domains: int, feature_shape: Tuple[int, int, int],
                 gamma: float = 0.8, bootstrap: bool = True):
        if not 0.0 <= gamma < 1.0:
            raise ConfigError(f"prototype momentum gamma must lie in [0, 1), got {gamma}")
        if num_classes < 1 or num_domains < 1:
            raise ConfigError("prototype bank needs at least one class and one domain")
        self.num_classes = int(num_classes)
        self.num_domains = int(num_domains)
        self.feature_shape = tuple(int(v) for v in feature_shape)
        self.channels = self.feature_shape[0]
        self.gamma = float(gamma)
        self.bootstrap = bool(bootstrap)

        self.r = np.zeros((self.num_classes,) + self.feature_shape)
        self.u = np.zeros((self.num_domains, self.channels))
        self.v = np.zeros((self.num_domains, self.channels))
        self.class_initialized = np.zeros(self.num_classes, dtype=bool)
        self.domain_initialized = np.zeros(self.num_domains, dtype=bool)
        self.commits = 0
        self.reset_accumulators()

    def reset_accumulators(self) -> None:
        self._z_sum = np.zeros_like(self.r)
        self._class_count = np.zeros(self.num_classes, dtype=np.int64)
        self._mu_sum = np.zeros_like(self.u)
        self._sigma_sum = np.zeros_like(self.v)
        self._domain_count = np.zeros(self.num_domains, dtype=np.int64)

    @property
    def class_counts(self) -> np.ndarray:
        return self._class_count.copy()

    @property
    def domain_counts(self) -> np.ndarray:
        return self._domain_count.copy()

    @property
    def is_ready(self) -> bool:
        return bool(self.class_initialized.all() and self.domain_initialized.all())

    def _check_ids(self, y: np.ndarray, d: np.ndarray) -> None:
        if np.any(y < 0) or np.any(y >= self.num_classes):
            raise ValueError(f"class id out of range [0, {self.num_classes})")
        if np.any(d < 0) or np.any(d >= self.num_domains):
            raise ValueError(f"domain id out of range [0, {self.num_domains})")

    def accumulate(self, dec: Decomposition, y: int, d: int) -> None:
        """Add one example's decomposition to the running epoch sums"""
        self.accumulate_batch(dec.z.data[np.newaxis], dec.mu.data.reshape(1, -1),
                              dec.sigma.data.reshape(1, -1), np.array([y]), np.array([d]))

    def accumulate_batch(self, z: np.ndarray, mu: np.ndarray, sigma: np.ndarray,
                         y: np.ndarray, d: np.ndarray) -> None:
        """Batched accumulate; z is [N, C, H, W], mu and sigma are [N, C] (or [N, C, 1, 1])"""
        y = np.asarray(y, dtype=np.int64)
        d = np.asarray(d, dtype=np.int64)
        self._check_ids(y, d)
        n = len(y)
        z = np.asarray(z, dtype=np.float64).reshape((n,) + self.feature_shape)
        mu = np.asarray(mu, dtype=np.float64).reshape(n, self.channels)
        sigma = np.asarray(sigma, dtype=np.float64).reshape(n, self.channels)

        np.add.at(self._z_sum, y, z)
        np.add.at(self._class_count, y, 1)
        np.add.at(self._mu_sum, d, mu)
        np.add.at(self._sigma_sum, d, sigma)
        np.add.at(self._domain_count, d, 1)

    def accumulate_decomposition(self, dec: Decomposition, y: np.ndarray, d: np.ndarray) -> None:
        self.accumulate_batch(dec.z.data, dec.mu.data, dec.sigma.data, y, d)

    def estimates(self) -> Dict[str, np.ndarray]:
        """Current epoch means; entries with no examples are NaN"""
        with np.errstate(invalid='ignore', divide='ignore'):
            class_div = self._class_count.reshape((-1,) + (1,) * len(self.feature_shape))
            domain_div = self._domain_count.reshape(-1, 1)
            return {
                'r': self._z_sum / class_div,
                'u': self._mu_sum / domain_div,
                'v': self._sigma_sum / domain_div,
            }

    def _blend(self, old: np.ndarray, estimate: np.ndarray, initialized: bool) -> np.ndarray:
        if not initialized and self.bootstrap:
            return estimate.copy()
        return self.gamma * old + (1.0 - self.gamma) * estimate

    def commit_epoch(self, only_uninitialized: bool = False) -> Dict[str, List[int]]:
        """EMA update from this epoch's estimates, then reset the accumulators

        Returns the class and domain ids that had no examples and were carried over.
        With only_uninitialized, entries that already hold a value are left untouched.
        """
        est = self.estimates()
        missing_classes, missing_domains = [], []

        for c in range(self.num_classes):
            if self._class_count[c] == 0:
                missing_classes.append(c)
                continue
            if only_uninitialized and self.class_initialized[c]:
                continue
            self.r[c] = self._blend(self.r[c], est['r'][c], self.class_initialized[c])
            self.class_initialized[c] = True

        for d in range(self.num_domains):
            if self._domain_count[d] == 0:
                missing_domains.append(d)
                continue
            if only_uninitialized and self.domain_initialized[d]:
                continue
            self.u[d] = self._blend(self.u[d], est['u'][d], self.domain_initialized[d])
            self.v[d] = self._blend(self.v[d], est['v'][d], self.domain_initialized[d])
            self.domain_initialized[d] = True

        if missing_classes or missing_domains:
            logger.warning(f"Prototype commit {self.commits}: no examples for classes "
                           f"{missing_classes} / domains {missing_domains}; previous values kept")
        self.commits += 1
        self.reset_accumulators()
        return {'classes': missing_classes, 'domains': missing_domains}

    def prototype(self, c: int) -> np.ndarray:
        if not 0 <= c < self.num_classes:
            raise ValueError(f"class id {c} out of range")
        if not self.class_initialized[c]:
            raise BankError(f"class prototype {c} has not been committed yet")
        return self.r[c]

    def domain_statistics(self, d: int) -> Tuple[np.ndarray, np.ndarray]:
        if not 0 <= d < self.num_domains:
            raise ValueError(f"domain id {d} out of range")
        if not self.domain_initialized[d]:
            raise BankError(f"domain statistics {d} have not been committed yet")
        return self.u[d], self.v[d]

    def prototypes_for(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=np.int64)
        self._check_ids(y, np.zeros_like(y))
        if not self.class_initialized[y].all():
            raise BankError(f"class prototypes {sorted(set(y[~self.class_initialized[y]]))} not committed")
        return self.r[y]

    def statistics_for(self, d: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        d = np.asarray(d, dtype=np.int64)
        self._check_ids(np.zeros_like(d), d)
        if not self.domain_initialized[d].all():
            raise BankError(f"domain statistics {sorted(set(d[~self.domain_initialized[d]]))} not committed")
        return self.u[d], self.v[d]

    def state_arrays(self) -> Dict[str, np.ndarray]:
        """Every array needed to restore the bank, in a fixed order"""
        return {
            'r': self.r,
            'u': self.u,
            'v': self.v,
            'class_initialized': self.class_initialized.astype(np.float64),
            'domain_initialized': self.domain_initialized.astype(np.float64),
            'z_sum': self._z_sum,
            'class_count': self._class_count.astype(np.float64),
            'mu_sum': self._mu_sum,
            'sigma_sum': self._sigma_sum,
            'domain_count': self._domain_count.astype(np.float64),
        }

    def metadata(self) -> Dict[str, Any]:
        return {
            'num_classes': self.num_classes,
            'num_domains': self.num_domains,
            'feature_shape': list(self.feature_shape),
            'gamma': self.gamma,
            'bootstrap': self.bootstrap,
            'commits': self.commits,
        }

    @classmethod
    def from_state(cls, metadata: Dict[str, Any], arrays: Dict[str, np.ndarray]) -> 'PrototypeBank':
        bank = cls(metadata['num_classes'], metadata['num_domains'], tuple(metadata['feature_shape']),
                   gamma=metadata['gamma'], bootstrap=metadata['bootstrap'])
        bank.commits = int(metadata['commits'])
        bank.r = arrays['r'].copy()
        bank.u = arrays['u'].copy()
        bank.v = arrays['v'].copy()
        bank.class_initialized = arrays['class_initialized'].astype(bool)
        bank.domain_initialized = arrays['domain_initialized'].astype(bool)
        bank._z_sum = arrays['z_sum'].copy()
        bank._class_count = arrays['class_count'].astype(np.int64)
        bank._mu_sum = arrays['mu_sum'].copy()
        bank._sigma_sum = arrays['sigma_sum'].copy()
        bank._domain_count = arrays['domain_count'].astype(np.int64)
        return bank
