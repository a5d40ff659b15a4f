"""
Feature Augmenter Module
Instance-norm disentanglement of hidden representations and reassembly of
semantic factors with another example's nuisance statistics, optionally pulled
towards class prototypes and class-agnostic domain statistics.

Shapes: a single representation is [C, H, W], a batch is [N, C, H, W]. The
statistics mu and sigma keep broadcastable shapes ([C, 1, 1] or [N, C, 1, 1]).
"""

from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Tuple, Union

import numpy as np

from src.autodiff.tensor import Tensor, TensorLike, as_tensor, mean, sqrt
from src.utils.errors import ConfigError, ShapeError

if TYPE_CHECKING:
    from src.augmentation.prototype_bank import PrototypeBank

DEFAULT_EPS = 1e-5
AUGMENTATION_MODES = ('full', 'none', 'c_only', 'd_only')

Lambda = Union[float, np.ndarray]


@dataclass
class Decomposition:
    """Semantic factor z and nuisance statistics (mu, sigma) of a representation"""

    z: Tensor
    mu: Tensor
    sigma: Tensor

    @property
    def stats(self) -> Tuple[Tensor, Tensor]:
        return self.mu, self.sigma


@dataclass
class MixCoefficients:
    """Interpolation weights; scalars or one value per example"""

    lambda_c: Lambda
    lambda_d: Lambda
    alpha_c: float = 0.5
    alpha_d: float = 0.5

    def __post_init__(self):
        if self.alpha_c <= 0 or self.alpha_d <= 0:
            raise ValueError("Beta concentrations must be > 0")
        _check_unit_interval(self.lambda_c, 'lambda_c')
        _check_unit_interval(self.lambda_d, 'lambda_d')


@dataclass
class AugmentedBatch:
    representation: Tensor
    labels: np.ndarray
    source: Decomposition
    partner: Decomposition


def _check_unit_interval(value: Lambda, name: str) -> None:
    arr = np.asarray(value, dtype=np.float64)
    if np.any(arr < 0.0) or np.any(arr > 1.0) or not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must lie in [0, 1]")


def _lambda_for(value: Lambda, like: Tensor) -> Union[float, np.ndarray]:
    """Scalar stays scalar; per-example values broadcast over all non-batch axes"""
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        return float(arr)
    if like.ndim < 2 or arr.shape != (like.shape[0],):
        raise ShapeError(f"per-example lambda of shape {arr.shape} does not fit batch {like.shape}")
    return arr.reshape((-1,) + (1,) * (like.ndim - 1))


def _constant_like(value, like: Tensor, name: str) -> np.ndarray:
    """Gradient-stopped constant reshaped onto a tensor's shape"""
    arr = np.asarray(value.data if isinstance(value, Tensor) else value, dtype=np.float64)
    if arr.size != like.size:
        raise ShapeError(f"{name} of shape {arr.shape} does not match {like.shape}")
    return arr.reshape(like.shape)


def sample_beta(alpha: float, rng: np.random.Generator, size: Optional[int] = None):
    """Draw from the symmetric Beta(alpha, alpha)"""
    if not alpha > 0:
        raise ValueError(f"Beta concentration must be > 0, got {alpha}")
    if size is None:
        return float(rng.beta(alpha, alpha))
    return rng.beta(alpha, alpha, size=size)


def disentangle(s: TensorLike, eps: float = DEFAULT_EPS) -> Decomposition:
    """z = (s - mu) / sigma with population statistics over the spatial axes"""
    s = as_tensor(s)
    if s.ndim not in (3, 4):
        raise ShapeError(f"expected [C, H, W] or [N, C, H, W], got {s.shape}")
    if s.shape[-1] * s.shape[-2] < 2:
        raise ShapeError("instance statistics need at least two spatial positions")
    if eps < 0:
        raise ValueError("eps must be >= 0")

    mu = mean(s, axis=(-2, -1), keepdims=True)
    centered = s - mu
    var = mean(centered * centered, axis=(-2, -1), keepdims=True)
    sigma = sqrt(var + eps)
    return Decomposition(z=centered / sigma, mu=mu, sigma=sigma)


def instance_stats(s: TensorLike, eps: float = DEFAULT_EPS) -> Tuple[np.ndarray, np.ndarray]:
    """Per-channel (mu, sigma) as plain arrays of shape [..., C]"""
    dec = disentangle(as_tensor(s).detach(), eps)
    return dec.mu.data[..., 0, 0], dec.sigma.data[..., 0, 0]


def reassemble(dec_i: Decomposition, stats_j: Tuple[TensorLike, TensorLike]) -> Tensor:
    """sigma_j * z_i + mu_j; the caller keeps the label of example i"""
    mu_j, sigma_j = (as_tensor(t) for t in stats_j)
    if mu_j.size != dec_i.mu.size or sigma_j.size != dec_i.sigma.size:
        raise ShapeError(f"statistics for {mu_j.size} channels do not match "
                         f"{dec_i.mu.size} channels of the semantic factor")
    mu_j = mu_j.reshape(dec_i.mu.shape)
    sigma_j = sigma_j.reshape(dec_i.sigma.shape)
    return sigma_j * dec_i.z + mu_j


def enhance_semantic(z_i: TensorLike, r_c, lambda_c: Lambda) -> Tensor:
    """lambda_c * z_i + (1 - lambda_c) * r_c with the prototype held constant"""
    z_i = as_tensor(z_i)
    _check_unit_interval(lambda_c, 'lambda_c')
    r_arr = np.asarray(r_c.data if isinstance(r_c, Tensor) else r_c, dtype=np.float64)
    if r_arr.shape != z_i.shape:
        raise ShapeError(f"prototype shape {r_arr.shape} does not match semantic factor {z_i.shape}")
    lam = _lambda_for(lambda_c, z_i)
    return lam * z_i + (1.0 - lam) * r_arr


def enhance_nuisance(mu_j: TensorLike, sigma_j: TensorLike, u_d, v_d,
                     lambda_d: Lambda) -> Tuple[Tensor, Tensor]:
    """Interpolate (mu_j, sigma_j) towards the class-agnostic domain statistics (u_d, v_d)"""
    mu_j, sigma_j = as_tensor(mu_j), as_tensor(sigma_j)
    _check_unit_interval(lambda_d, 'lambda_d')
    u = _constant_like(u_d, mu_j, 'u_d')
    v = _constant_like(v_d, sigma_j, 'v_d')
    if np.any(v <= 0):
        raise ValueError("v_d must be positive elementwise")
    lam = _lambda_for(lambda_d, mu_j)
    return lam * mu_j + (1.0 - lam) * u, lam * sigma_j + (1.0 - lam) * v


def augment_batch(s_i: TensorLike, y_i: np.ndarray, s_j: TensorLike, d_j: np.ndarray,
                  bank: Optional['PrototypeBank'], lambda_c: Lambda, lambda_d: Lambda,
                  eps: float = DEFAULT_EPS, detach_nuisance: bool = False,
                  use_class_prototypes: bool = True,
                  use_domain_statistics: bool = True) -> AugmentedBatch:
    """s' = sigma'(s_j) * z'(s_i) + mu'(s_j) for a batch of pairs, labelled with y_i"""
    s_i, s_j = as_tensor(s_i), as_tensor(s_j)
    if s_i.shape != s_j.shape or s_i.ndim != 4:
        raise ShapeError(f"paired batches must share an [N, C, H, W] shape, got {s_i.shape} and {s_j.shape}")
    y_i = np.asarray(y_i, dtype=np.int64)
    d_j = np.asarray(d_j, dtype=np.int64)

    dec_i = disentangle(s_i, eps)
    dec_j = disentangle(s_j, eps)

    z = dec_i.z
    if use_class_prototypes:
        z = enhance_semantic(z, bank.prototypes_for(y_i), lambda_c)

    mu, sigma = dec_j.mu, dec_j.sigma
    if detach_nuisance:
        mu, sigma = mu.detach(), sigma.detach()
    if use_domain_statistics:
        u, v = bank.statistics_for(d_j)
        mu, sigma = enhance_nuisance(mu, sigma, u, v, lambda_d)

    return AugmentedBatch(representation=sigma * z + mu, labels=y_i.copy(),
                          source=dec_i, partner=dec_j)


def augment_pair(s_i: TensorLike, y_i: int, s_j: TensorLike, d_j: int,
                 bank: 'PrototypeBank', coeffs: MixCoefficients,
                 eps: float = DEFAULT_EPS, detach_nuisance: bool = False) -> Tuple[Tensor, int]:
    """Single-pair form of augment_batch; returns (s', y')"""
    s_i, s_j = as_tensor(s_i), as_tensor(s_j)
    if s_i.ndim != 3:
        raise ShapeError(f"expected a single [C, H, W] representation, got {s_i.shape}")
    batch = augment_batch(s_i.reshape((1,) + s_i.shape), np.array([y_i]),
                          s_j.reshape((1,) + s_j.shape), np.array([d_j]),
                          bank, float(coeffs.lambda_c), float(coeffs.lambda_d),
                          eps=eps, detach_nuisance=detach_nuisance)
    return batch.representation.reshape(s_i.shape), int(y_i)


class FeatureAugmenter:
    """Draws mixing coefficients and builds augmented batches for one training run"""

    def __init__(self, alpha_c: float = 0.5, alpha_d: float = 0.5, mode: str = 'full',
                 eps: float = DEFAULT_EPS, detach_nuisance: bool = False,
                 fixed_lambda: Optional[float] = None):
        if mode not in AUGMENTATION_MODES:
            raise ConfigError(f"unknown augmentation mode '{mode}', expected one of {AUGMENTATION_MODES}")
        if alpha_c <= 0 or alpha_d <= 0:
            raise ConfigError("alpha_c and alpha_d must be > 0")
        if fixed_lambda is not None:
            _check_unit_interval(fixed_lambda, 'fixed_lambda')
        self.alpha_c = alpha_c
        self.alpha_d = alpha_d
        self.mode = mode
        self.eps = eps
        self.detach_nuisance = detach_nuisance
        self.fixed_lambda = fixed_lambda

    @property
    def use_class_prototypes(self) -> bool:
        return self.mode in ('full', 'c_only')

    @property
    def use_domain_statistics(self) -> bool:
        return self.mode in ('full', 'd_only')

    def _draw(self, enabled: bool, alpha: float, n: int, rng: np.random.Generator) -> np.ndarray:
        if not enabled:
            return np.ones(n)
        if self.fixed_lambda is not None:
            return np.full(n, float(self.fixed_lambda))
        return sample_beta(alpha, rng, size=n)

    def sample_coefficients(self, n: int, rng: np.random.Generator) -> MixCoefficients:
        """One lambda_c and one lambda_d per example, redrawn every call"""
        lambda_c = self._draw(self.use_class_prototypes, self.alpha_c, n, rng)
        lambda_d = self._draw(self.use_domain_statistics, self.alpha_d, n, rng)
        return MixCoefficients(lambda_c, lambda_d, self.alpha_c, self.alpha_d)

    def augment(self, s_i: Tensor, y_i: np.ndarray, s_j: Tensor, d_j: np.ndarray,
                bank: Optional['PrototypeBank'], rng: np.random.Generator) -> AugmentedBatch:
        coeffs = self.sample_coefficients(s_i.shape[0], rng)
        return augment_batch(s_i, y_i, s_j, d_j, bank, coeffs.lambda_c, coeffs.lambda_d,
                             eps=self.eps, detach_nuisance=self.detach_nuisance,
                             use_class_prototypes=self.use_class_prototypes,
                             use_domain_statistics=self.use_domain_statistics)
