"""Tests for the ERM and balanced-augmentation training loops"""

import json
from dataclasses import replace

import numpy as np
import pytest

from src.autodiff.tensor import backward
from src.data.synthetic_generator import Dataset
from src.models.network import Network
from src.training.losses import cross_entropy
from src.training.optimizer import SGD
from src.training.trainer import TrainConfig, Trainer, new_state, train_erm, train_tally
from src.utils.errors import BankError, ConfigError, NumericalError


def test_zero_learning_rate_leaves_parameters_unchanged(tiny_splits, tiny_network_config, fast_train_config):
    config = replace(fast_train_config, learning_rate=0.0)
    initial = Network.init_parameters(tiny_network_config, seed=3).get_flat_parameters()
    for trainer in (train_erm, train_tally):
        state = trainer(tiny_splits.train, config, tiny_network_config, seed=3)
        np.testing.assert_array_equal(state.network.get_flat_parameters(), initial)


def test_small_step_decreases_loss_on_a_frozen_batch(tiny_splits, tiny_network_config):
    network = Network.init_parameters(tiny_network_config, seed=0)
    x, y = tiny_splits.train.x[:16], tiny_splits.train.y[:16]
    before = cross_entropy(network(x), y)
    backward(before)
    SGD(network.parameters, learning_rate=1e-3, momentum=0.0).step()
    after = cross_entropy(network(x), y)
    assert float(after.data) < float(before.data)


def test_full_warm_start_is_exactly_erm(tiny_splits, tiny_network_config, fast_train_config):
    config = replace(fast_train_config, warm_start_epochs=fast_train_config.epochs)
    erm = train_erm(tiny_splits.train, config, tiny_network_config, seed=5)
    tally = train_tally(tiny_splits.train, config, tiny_network_config, seed=5)
    np.testing.assert_array_equal(erm.network.get_flat_parameters(),
                                  tally.network.get_flat_parameters())
    assert [r['loss'] for r in erm.history] == [r['loss'] for r in tally.history]


def test_augmented_targets_are_source_labels(tiny_splits, tiny_network_config, fast_train_config):
    state = new_state('tally', tiny_splits.train, fast_train_config, tiny_network_config, seed=1)
    trainer = Trainer(tiny_splits.train, state)
    trainer.run(max_steps=fast_train_config.steps_per_epoch + 3)
    assert trainer.last_pairs is not None
    np.testing.assert_array_equal(trainer.last_targets, tiny_splits.train.y[trainer.last_pairs[0]])


def test_bank_only_changes_at_epoch_boundaries(tiny_splits, tiny_network_config, fast_train_config):
    state = new_state('tally', tiny_splits.train, fast_train_config, tiny_network_config, seed=2)
    trainer = Trainer(tiny_splits.train, state)
    steps = fast_train_config.steps_per_epoch
    trainer.run(max_steps=steps + 1)
    commits = state.bank.commits
    r, u, v = state.bank.r.copy(), state.bank.u.copy(), state.bank.v.copy()
    trainer.run(max_steps=steps - 2)
    np.testing.assert_array_equal(state.bank.r, r)
    np.testing.assert_array_equal(state.bank.u, u)
    np.testing.assert_array_equal(state.bank.v, v)
    assert state.bank.commits == commits
    trainer.run(max_steps=1)
    assert state.bank.commits == commits + 1
    assert not np.array_equal(state.bank.r, r)


def test_without_warm_start_the_bank_is_filled_before_augmenting(tiny_splits, tiny_network_config,
                                                                   fast_train_config):
    config = replace(fast_train_config, warm_start_epochs=0)
    state = train_tally(tiny_splits.train, config, tiny_network_config, seed=0)
    assert state.bank.is_ready
    assert all(r['phase'] == 'tally' for r in state.history)


def test_bank_that_cannot_be_filled_fails_once(tiny_splits, tiny_network_config, fast_train_config):
    train = tiny_splits.train
    keep = train.y != 4
    missing_class = Dataset(train.x[keep], train.y[keep], train.d[keep], train.num_classes,
                            train.num_domains, train.domain_ids)
    config = replace(fast_train_config, warm_start_epochs=0, sampler='group_balanced')
    state = new_state('tally', missing_class, config, tiny_network_config, seed=0)
    trainer = Trainer(missing_class, state)
    with pytest.raises(BankError, match=r"classes \[4\]"):
        trainer.run(1)
    assert state.step == 0
    assert state.bank.commits == 1


def test_interrupted_run_matches_uninterrupted(tiny_splits, tiny_network_config, fast_train_config):
    full = train_tally(tiny_splits.train, fast_train_config, tiny_network_config, seed=4)
    state = new_state('tally', tiny_splits.train, fast_train_config, tiny_network_config, seed=4)
    trainer = Trainer(tiny_splits.train, state)
    trainer.run(max_steps=5)
    trainer.run(max_steps=2)
    trainer.run()
    np.testing.assert_array_equal(state.network.get_flat_parameters(), full.network.get_flat_parameters())


def test_non_finite_parameters_raise_numerical_error(tiny_splits, tiny_network_config, fast_train_config):
    state = new_state('erm', tiny_splits.train, fast_train_config, tiny_network_config, seed=0)
    flat = state.network.get_flat_parameters()
    flat[:] = np.nan
    state.network.set_flat_parameters(flat)
    with pytest.raises(NumericalError, match="step 0"):
        Trainer(tiny_splits.train, state).erm_step()


def test_epoch_log_has_one_json_line_per_epoch(tiny_splits, tiny_network_config, fast_train_config, tmp_path):
    log_path = tmp_path / 'train_log.jsonl'
    state = train_tally(tiny_splits.train, fast_train_config, tiny_network_config, seed=0,
                        val_set=tiny_splits.val, log_path=log_path)
    lines = log_path.read_text().strip().splitlines()
    assert len(lines) == fast_train_config.epochs
    records = [json.loads(line) for line in lines]
    assert [r['epoch'] for r in records] == list(range(fast_train_config.epochs))
    assert [r['phase'] for r in records] == ['warm_start', 'tally', 'tally']
    assert records[0]['sampler'] == 'selective'
    assert 0.0 <= records[-1]['val_accuracy'] <= 1.0
    assert len(state.history) == fast_train_config.epochs


def test_erm_with_balanced_sampler_and_focal_loss(tiny_splits, tiny_network_config, fast_train_config):
    config = replace(fast_train_config, sampler='group_balanced', loss='focal')
    state = train_erm(tiny_splits.train, config, tiny_network_config, seed=0)
    assert state.finished
    assert state.bank is None
    assert all(np.isfinite(r['loss']) for r in state.history)


@pytest.mark.parametrize("overrides", [
    {'learning_rate': -0.1},
    {'warm_start_epochs': 4, 'epochs': 3},
    {'gamma': 1.0},
    {'alpha_c': 0.0},
    {'sampler': 'round_robin'},
    {'augmentation': 'semantic_only'},
    {'fixed_lambda': 1.5},
    {'loss': 'hinge'},
])
def test_train_config_validation(overrides):
    with pytest.raises(ConfigError):
        TrainConfig(**overrides).validate()


def test_network_must_match_dataset_classes(tiny_splits, tiny_network_config, fast_train_config):
    with pytest.raises(ConfigError):
        new_state('erm', tiny_splits.train, fast_train_config,
                  replace(tiny_network_config, num_classes=4), seed=0)
    with pytest.raises(ConfigError):
        new_state('mixup', tiny_splits.train, fast_train_config, tiny_network_config, seed=0)


def test_config_from_dict_coerces_and_ignores_unknown_keys():
    config = TrainConfig.from_dict({'epochs': '4', 'warm_start_epochs': 2.0, 'method': 'tally'})
    assert config.epochs == 4 and config.warm_start_epochs == 2


def test_config_from_dict_coerces_exponent_strings():
    config = TrainConfig.from_dict({'learning_rate': '1e-3', 'weight_decay': '2e-4', 'eps': '1e-5',
                                    'gamma': '0.5', 'fixed_lambda': None})
    assert config.learning_rate == 0.001 and isinstance(config.learning_rate, float)
    assert config.weight_decay == 2e-4 and config.eps == 1e-5 and config.gamma == 0.5
    assert config.fixed_lambda is None
    assert TrainConfig.from_dict({'fixed_lambda': '0.25'}).fixed_lambda == 0.25
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({'learning_rate': 'fast'})
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({'epochs': [3]})


@pytest.mark.slow
def test_erm_learns_a_separable_toy_problem(tiny_spec, tiny_network_config):
    from src.data.synthetic_generator import generate

    splits = generate(replace(tiny_spec, imbalance_ratio=1.0, noise_std=0.0))
    config = TrainConfig(learning_rate=0.05, batch_size=16, epochs=20, steps_per_epoch=20,
                         warm_start_epochs=0)
    state = train_erm(splits.train, config, tiny_network_config, seed=0)
    predictions = np.argmax(state.network.predict_logits(splits.test.x), axis=1)
    assert np.mean(predictions == splits.test.y) > 0.6


@pytest.mark.slow
def test_tally_with_fixed_half_mixing_trains_without_error(tiny_splits, tiny_network_config):
    config = TrainConfig(learning_rate=0.02, batch_size=16, epochs=6, steps_per_epoch=10,
                         warm_start_epochs=2, fixed_lambda=0.5)
    state = train_tally(tiny_splits.train, config, tiny_network_config, seed=0)
    assert state.finished
    assert all(np.isfinite(r['loss']) for r in state.history)
