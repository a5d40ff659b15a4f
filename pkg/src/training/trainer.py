"""
Trainer Module
ERM baseline and the balanced-augmentation training loop with warm start,
per-epoch prototype commits and resumable state
"""

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
from tqdm import tqdm

from src.augmentation.feature_augmenter import AUGMENTATION_MODES, FeatureAugmenter, disentangle
from src.augmentation.prototype_bank import PrototypeBank
from src.autodiff.tensor import backward, no_grad
from src.data.synthetic_generator import Dataset
from src.metrics.metric_calculator import macro_f1
from src.models.network import Network, NetworkConfig
from src.sampling.pair_sampler import SAMPLER_STRATEGIES, PairSampler, SamplerConfig
from src.training.losses import LOSSES, get_loss
from src.training.optimizer import SGD
from src.utils.errors import BankError, ConfigError, NumericalError
from src.utils.logger import RunLogWriter, get_logger

logger = get_logger(__name__)

TRAINER_KINDS = ('erm', 'tally')
RECOMPUTE_MODES = ('streaming', 'full')
INT_FIELDS = ('batch_size', 'epochs', 'steps_per_epoch', 'warm_start_epochs')
FLOAT_FIELDS = ('learning_rate', 'momentum', 'weight_decay', 'gamma', 'alpha_c', 'alpha_d',
                'focal_gamma', 'fixed_lambda', 'mix_original', 'eps')


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation and augmentation settings of one training run"""

    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-6
    batch_size: int = 32
    epochs: int = 15
    steps_per_epoch: int = 50
    warm_start_epochs: int = 7
    gamma: float = 0.8
    alpha_c: float = 0.5
    alpha_d: float = 0.5
    loss: str = 'cross_entropy'
    focal_gamma: float = 2.0
    sampler: str = 'selective'
    augmentation: str = 'full'
    fixed_lambda: Optional[float] = None
    detach_nuisance: bool = False
    mix_original: float = 0.0
    prototype_recompute: str = 'streaming'
    eps: float = 1e-5

    def validate(self) -> 'TrainConfig':
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.batch_size < 1 or self.steps_per_epoch < 1 or self.epochs < 1:
            raise ConfigError("batch_size, steps_per_epoch and epochs must be >= 1")
        if not 0 <= self.warm_start_epochs <= self.epochs:
            raise ConfigError(f"warm_start_epochs must lie in [0, epochs={self.epochs}]")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must lie in [0, 1)")
        if self.alpha_c <= 0 or self.alpha_d <= 0:
            raise ConfigError("alpha_c and alpha_d must be > 0")
        if self.loss not in LOSSES:
            raise ConfigError(f"unknown loss '{self.loss}', expected one of {LOSSES}")
        if self.focal_gamma < 0:
            raise ConfigError("focal_gamma must be >= 0")
        if self.sampler not in SAMPLER_STRATEGIES:
            raise ConfigError(f"unknown sampler '{self.sampler}', expected one of {SAMPLER_STRATEGIES}")
        if self.augmentation not in AUGMENTATION_MODES:
            raise ConfigError(f"unknown augmentation '{self.augmentation}'")
        if self.fixed_lambda is not None and not 0.0 <= self.fixed_lambda <= 1.0:
            raise ConfigError("fixed_lambda must lie in [0, 1]")
        if not 0.0 <= self.mix_original <= 1.0:
            raise ConfigError("mix_original must lie in [0, 1]")
        if self.prototype_recompute not in RECOMPUTE_MODES:
            raise ConfigError(f"prototype_recompute must be one of {RECOMPUTE_MODES}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.eps < 0:
            raise ConfigError("eps must be >= 0")
        return self

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'TrainConfig':
        fields = cls.__dataclass_fields__
        known = {k: v for k, v in data.items() if k in fields}
        # PyYAML reads exponent floats without a dot ("1e-3") as strings
        try:
            for name in INT_FIELDS:
                if name in known:
                    known[name] = int(known[name])
            for name in FLOAT_FIELDS:
                if known.get(name) is not None:
                    known[name] = float(known[name])
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid training value: {e}") from e
        return cls(**known).validate()


@dataclass
class TrainState:
    """Everything needed to continue a run bit-exactly"""

    kind: str
    seed: int
    config: TrainConfig
    network: Network
    optimizer: SGD
    rng: np.random.Generator
    bank: Optional[PrototypeBank] = None
    step: int = 0
    history: List[Dict[str, Any]] = field(default_factory=list)
    epoch_losses: List[float] = field(default_factory=list)

    @property
    def epoch(self) -> int:
        return self.step // self.config.steps_per_epoch

    @property
    def finished(self) -> bool:
        return self.step >= self.config.total_steps


def training_rng(seed: int) -> np.random.Generator:
    """Sampling and mixing stream, separate from the parameter-initialisation stream"""
    return np.random.default_rng([int(seed), 1])


def new_state(kind: str, dataset: Dataset, config: TrainConfig, network_config: NetworkConfig,
              seed: int) -> TrainState:
    if kind not in TRAINER_KINDS:
        raise ConfigError(f"unknown trainer kind '{kind}'")
    config = config.validate()
    if network_config.num_classes != dataset.num_classes:
        raise ConfigError(f"network has {network_config.num_classes} classes, "
                          f"dataset has {dataset.num_classes}")
    network = Network.init_parameters(network_config, seed)
    optimizer = SGD(network.parameters, config.learning_rate, config.momentum, config.weight_decay)
    bank = None
    if kind == 'tally':
        bank = PrototypeBank(dataset.num_classes, dataset.num_domains, network_config.hidden_shape,
                             gamma=config.gamma)
    return TrainState(kind=kind, seed=int(seed), config=config, network=network,
                      optimizer=optimizer, rng=training_rng(seed), bank=bank)


class Trainer:
    """Runs ERM or balanced-augmentation steps on a TrainState"""

    def __init__(self, dataset: Dataset, state: TrainState, val_set: Optional[Dataset] = None,
                 log_path: Optional[Union[str, Path]] = None, progress: bool = False):
        if len(dataset) == 0:
            raise ConfigError("cannot train on an empty dataset")
        self.dataset = dataset
        self.state = state
        self.config = state.config
        self.val_set = val_set if val_set is not None and len(val_set) else None
        self.log_writer = RunLogWriter(log_path) if log_path else None
        self.progress = progress
        self.loss_fn = get_loss(self.config.loss, self.config.focal_gamma)
        self.index = dataset.group_index()

        strategy = self.config.sampler
        if state.kind == 'erm' and strategy == 'selective':
            strategy = 'empirical'
        self.sampler = PairSampler(self.index, SamplerConfig(strategy=strategy, seed=state.seed), state.rng)
        self.augmenter = FeatureAugmenter(self.config.alpha_c, self.config.alpha_d,
                                          mode=self.config.augmentation, eps=self.config.eps,
                                          detach_nuisance=self.config.detach_nuisance,
                                          fixed_lambda=self.config.fixed_lambda)
        self.last_targets: Optional[np.ndarray] = None
        self.last_pairs = None

    @property
    def network(self) -> Network:
        return self.state.network

    def _is_warm(self, epoch: int) -> bool:
        return self.state.kind == 'erm' or epoch < self.config.warm_start_epochs

    def _streaming(self) -> bool:
        return self.state.bank is not None and self.config.prototype_recompute == 'streaming'

    def _descend(self, loss) -> float:
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericalError(f"loss became {value} at step {self.state.step} "
                                 f"(epoch {self.state.epoch}); lower the learning rate")
        self.state.optimizer.zero_grad()
        backward(loss)
        self.state.optimizer.step()
        return value

    def erm_step(self) -> float:
        """One ERM update; warm-start batches are empirical, ERM runs use its sampler"""
        if self.state.kind == 'tally':
            idx = self.sampler.draw_warmstart_batch(self.config.batch_size)
        else:
            idx = self.sampler.draw_examples(self.config.batch_size)
        y = self.dataset.y[idx]
        s = self.network.features(self.dataset.x[idx])
        loss = self.loss_fn(self.network.head(s), y)
        if self._streaming():
            dec = disentangle(s.detach(), self.config.eps)
            self.state.bank.accumulate_decomposition(dec, y, self.dataset.d[idx])
        self.last_targets = y
        return self._descend(loss)

    def tally_step(self) -> float:
        """One update on a batch made entirely of reassembled representations"""
        bank = self.state.bank
        i_idx, j_idx = self.sampler.draw_pairs(self.config.batch_size)
        y_i, d_i = self.dataset.y[i_idx], self.dataset.d[i_idx]
        y_j, d_j = self.dataset.y[j_idx], self.dataset.d[j_idx]

        s_i = self.network.features(self.dataset.x[i_idx])
        s_j = self.network.features(self.dataset.x[j_idx])
        augmented = self.augmenter.augment(s_i, y_i, s_j, d_j, bank, self.state.rng)
        representation = augmented.representation
        if self.config.mix_original > 0:
            keep = (self.state.rng.random(len(y_i)) < self.config.mix_original).astype(np.float64)
            keep = keep.reshape(-1, 1, 1, 1)
            representation = representation * (1.0 - keep) + s_i * keep

        loss = self.loss_fn(self.network.head(representation), augmented.labels)
        if self._streaming():
            for dec, y, d in ((augmented.source, y_i, d_i), (augmented.partner, y_j, d_j)):
                bank.accumulate_batch(dec.z.data, dec.mu.data, dec.sigma.data, y, d)
        self.last_targets = augmented.labels
        self.last_pairs = (i_idx, j_idx)
        return self._descend(loss)

    def full_pass_estimates(self, batch_size: int = 256) -> None:
        """Refill the bank accumulators from every training example without gradients"""
        bank = self.state.bank
        bank.reset_accumulators()
        with no_grad():
            for start in range(0, len(self.dataset), batch_size):
                stop = start + batch_size
                s = self.network.features(self.dataset.x[start:stop])
                bank.accumulate_decomposition(disentangle(s, self.config.eps),
                                              self.dataset.y[start:stop], self.dataset.d[start:stop])

    def _ensure_bank(self) -> None:
        """Entries never committed (no warm start, or unseen during it) come from one full pass"""
        bank = self.state.bank
        if bank is None or bank.is_ready or not self.augmenter_needs_bank:
            return
        # only reached on the first augmented step, right after a commit emptied the accumulators
        logger.info(f"Prototype bank incomplete after {bank.commits} commits; filling from a full pass")
        self.full_pass_estimates()
        missing = bank.commit_epoch(only_uninitialized=True)
        if not bank.is_ready:
            # a full pass saw every training example, so these stay empty for the whole run
            raise BankError(f"training set has no examples for classes {missing['classes']} / "
                            f"domains {missing['domains']}; the prototype bank cannot be filled")

    @property
    def augmenter_needs_bank(self) -> bool:
        return self.augmenter.use_class_prototypes or self.augmenter.use_domain_statistics

    def _validate(self) -> Dict[str, Optional[float]]:
        if self.val_set is None:
            return {'val_accuracy': None, 'val_macro_f1': None}
        predictions = np.argmax(self.network.predict_logits(self.val_set.x), axis=1)
        return {'val_accuracy': float(np.mean(predictions == self.val_set.y)),
                'val_macro_f1': macro_f1(predictions, self.val_set.y, self.val_set.num_classes)}

    def end_epoch(self, epoch: int) -> Dict[str, Any]:
        state = self.state
        missing = {'classes': [], 'domains': []}
        if state.bank is not None:
            if epoch >= self.config.warm_start_epochs - 1:
                if self.config.prototype_recompute == 'full':
                    self.full_pass_estimates()
                missing = state.bank.commit_epoch()
            else:
                state.bank.reset_accumulators()

        record = {
            'epoch': epoch,
            'phase': 'erm' if state.kind == 'erm' else ('warm_start' if self._is_warm(epoch) else 'tally'),
            'loss': float(np.mean(state.epoch_losses)),
            'lr': self.config.learning_rate,
            'sampler': self.sampler.config.strategy,
            'seed': state.seed,
            'step': state.step,
            'missing_prototypes': missing,
        }
        record.update(self._validate())
        state.history.append(record)
        state.epoch_losses = []
        if self.log_writer:
            self.log_writer.write(record)
        logger.debug(f"epoch {epoch} [{record['phase']}] loss={record['loss']:.4f}")
        return record

    def run(self, max_steps: Optional[int] = None) -> TrainState:
        """Advance until the configured number of steps, or at most max_steps more"""
        state, cfg = self.state, self.config
        target = cfg.total_steps if max_steps is None else min(cfg.total_steps, state.step + max_steps)
        with tqdm(total=cfg.epochs, initial=state.epoch, desc=f"{state.kind} seed {state.seed}",
                  disable=not self.progress, leave=False) as bar:
            while state.step < target:
                epoch = state.epoch
                if self._is_warm(epoch):
                    loss = self.erm_step()
                else:
                    self._ensure_bank()
                    loss = self.tally_step()
                state.epoch_losses.append(loss)
                state.step += 1
                if state.step % cfg.steps_per_epoch == 0:
                    self.end_epoch(epoch)
                    bar.update(1)
        return state


def train(kind: str, dataset: Dataset, config: TrainConfig, network_config: NetworkConfig,
          seed: int = 0, val_set: Optional[Dataset] = None,
          log_path: Optional[Union[str, Path]] = None, progress: bool = False) -> TrainState:
    state = new_state(kind, dataset, config, network_config, seed)
    logger.info(f"Training {kind} for {config.epochs} epochs x {config.steps_per_epoch} steps "
                f"(seed {seed}, sampler {config.sampler}, warm start {config.warm_start_epochs})")
    return Trainer(dataset, state, val_set, log_path, progress).run()


def train_erm(dataset: Dataset, config: TrainConfig, network_config: NetworkConfig, seed: int = 0,
              **kwargs) -> TrainState:
    """SGD-with-momentum minimisation of the mean loss over sampled batches"""
    return train('erm', dataset, config, network_config, seed, **kwargs)


def train_tally(dataset: Dataset, config: TrainConfig, network_config: NetworkConfig, seed: int = 0,
                **kwargs) -> TrainState:
    """ERM warm start, then training on reassembled representations only"""
    return train('tally', dataset, config, network_config, seed, **kwargs)
