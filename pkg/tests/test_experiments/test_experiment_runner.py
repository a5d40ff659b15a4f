"""Tests for experiment configs, single runs, sweeps and reports"""

import json
from dataclasses import replace

import pandas as pd
import pytest

from src.experiments.experiment_runner import (ExperimentConfig, build_report, config_hash,
                                               evaluate_checkpoint, generate_dataset, parse_seeds,
                                               run_experiment, run_sweep)
from src.training.trainer import TrainConfig
from src.utils.config import Config
from src.utils.errors import ConfigError

TINY_NETWORK = {'hidden_channels': 3, 'conv_blocks_before_r': 1, 'conv_blocks_after_r': 1}


@pytest.fixture
def tiny_experiment(tiny_spec):
    train = TrainConfig(learning_rate=0.05, batch_size=8, epochs=2, steps_per_epoch=3, warm_start_epochs=1)
    return ExperimentConfig(dataset=tiny_spec, train=train, network=dict(TINY_NETWORK), method='tally',
                            evaluation={'kl_min_samples': 3}, plots=False).validate()


def test_parse_seeds():
    assert parse_seeds('0..4') == [0, 1, 2, 3, 4]
    assert parse_seeds('3, 1,7') == [3, 1, 7]
    assert parse_seeds(2) == [2]
    assert parse_seeds([5, 6]) == [5, 6]
    for bad in ('4..0', 'a,b', ''):
        with pytest.raises(ConfigError):
            parse_seeds(bad)


def test_experiment_validation(tiny_experiment):
    assert replace(tiny_experiment, protocol='subpop').validate().protocol == 'subpopulation'
    assert replace(tiny_experiment, protocol='domainshift').validate().protocol == 'domain_shift'
    with pytest.raises(ConfigError):
        replace(tiny_experiment, method='mixup').validate()
    with pytest.raises(ConfigError):
        replace(tiny_experiment, protocol='iid').validate()
    with pytest.raises(ConfigError):
        replace(tiny_experiment, network={'hidden_channels': 0}).validate()
    detached = replace(tiny_experiment, methods=['tally'],
                       train=replace(tiny_experiment.train, detach_nuisance=True))
    with pytest.raises(ConfigError):
        detached.for_method('erm')
    assert detached.for_method('tally').method == 'tally'


def test_methods_pin_their_training_settings(tiny_experiment):
    assert tiny_experiment.for_method('erm').train_config().sampler == 'empirical'
    assert tiny_experiment.for_method('erm_balanced').train_config().sampler == 'group_balanced'
    assert tiny_experiment.for_method('focal').train_config().loss == 'focal'
    assert tiny_experiment.for_method('tally_c_only').train_config().augmentation == 'c_only'
    assert tiny_experiment.train_config().sampler == 'selective'


def test_config_hash_ignores_output_locations(tiny_experiment):
    digest = config_hash(tiny_experiment.resolved(0))
    moved = replace(tiny_experiment, output_dir='elsewhere', n_jobs=4)
    assert config_hash(moved.resolved(0)) == digest
    assert config_hash(tiny_experiment.resolved(1)) != digest
    assert config_hash(tiny_experiment.for_method('erm').resolved(0)) != digest


def test_from_config_reads_sections():
    config = Config(None, {'experiment': {'seeds': '0..2', 'method': 'focal', 'protocol': 'domainshift'},
                           'network': {'hidden_channels': 4}})
    exp = ExperimentConfig.from_config(config)
    assert exp.seeds == [0, 1, 2]
    assert exp.method == 'focal'
    assert exp.protocol == 'domain_shift'
    assert exp.network['hidden_channels'] == 4
    assert exp.dataset.num_classes == 10


def test_subpopulation_run_writes_its_directory(tiny_experiment, tmp_path):
    report = run_experiment(tiny_experiment, 0, tmp_path / 'run')
    for name in ('config.json', 'report.json', 'meta.json', 'train_log.jsonl'):
        assert (tmp_path / 'run' / name).exists()
    assert (tmp_path / 'run' / 'checkpoint' / 'manifest.json').exists()
    saved = json.loads((tmp_path / 'run' / 'report.json').read_text())
    assert saved['config_hash'] == config_hash(tiny_experiment.resolved(0))
    assert saved['protocol'] == 'subpopulation'
    assert saved['accuracy'] == report.accuracy
    assert set(saved['per_domain_accuracy']) == {'0', '1'}
    log_lines = (tmp_path / 'run' / 'train_log.jsonl').read_text().strip().splitlines()
    assert len(log_lines) == tiny_experiment.train.epochs


def test_runs_are_reproducible(tiny_experiment, tmp_path):
    run_experiment(tiny_experiment, 1, tmp_path / 'a')
    run_experiment(tiny_experiment, 1, tmp_path / 'b')
    assert (tmp_path / 'a' / 'report.json').read_bytes() == (tmp_path / 'b' / 'report.json').read_bytes()
    assert ((tmp_path / 'a' / 'checkpoint' / 'parameters.bin').read_bytes()
            == (tmp_path / 'b' / 'checkpoint' / 'parameters.bin').read_bytes())


def test_domain_shift_run_trains_one_fold_per_domain(tiny_experiment, tmp_path):
    exp = replace(tiny_experiment, protocol='domain_shift').validate()
    report = run_experiment(exp, 0, tmp_path)
    assert len(report.folds) == 2
    assert (tmp_path / 'fold0' / 'checkpoint').exists()
    assert (tmp_path / 'fold1' / 'checkpoint').exists()
    assert set(report.per_domain_accuracy) == {'0', '1'}
    assert report.worst_domain_accuracy == min(report.per_domain_accuracy.values())
    assert report.I_acc is None


def test_checkpoint_evaluation_matches_the_run(tiny_experiment, tiny_spec, tmp_path):
    data_dir = generate_dataset(tiny_spec, tmp_path / 'data')
    exp = replace(tiny_experiment, dataset_path=str(data_dir))
    report = run_experiment(exp, 0, tmp_path / 'run')
    evaluated = evaluate_checkpoint(tmp_path / 'run' / 'checkpoint', data_dir, 'subpop',
                                    evaluation={'kl_min_samples': 3})
    assert evaluated.accuracy == report.accuracy
    assert evaluated.macro_f1 == report.macro_f1
    assert evaluated.method == 'tally'


def test_domain_shift_evaluation_needs_a_held_out_domain(tiny_experiment, tiny_spec, tmp_path):
    data_dir = generate_dataset(tiny_spec, tmp_path / 'data')
    run_experiment(replace(tiny_experiment, dataset_path=str(data_dir)), 0, tmp_path / 'run')
    with pytest.raises(ConfigError):
        evaluate_checkpoint(tmp_path / 'run' / 'checkpoint', data_dir, 'domainshift')
    report = evaluate_checkpoint(tmp_path / 'run' / 'checkpoint', data_dir, 'domainshift', held_out=1)
    assert set(report.per_domain_accuracy) == {'1'}


def test_sweep_and_report(tiny_experiment, tmp_path):
    run_dirs = run_sweep(tiny_experiment, methods=['erm', 'tally'], seeds=[0, 1], out_dir=tmp_path, n_jobs=1)
    assert sorted(p.name for p in run_dirs) == ['erm_seed0', 'erm_seed1', 'tally_seed0', 'tally_seed1']
    assert (tmp_path / 'dataset' / 'manifest.json').exists()

    paths = build_report(run_dirs, tmp_path / 'report', plots=True)
    runs = pd.read_csv(paths['runs'])
    assert len(runs) == 4
    summary = pd.read_csv(paths['summary'])
    assert set(summary['method']) == {'erm', 'tally'}
    assert (summary[summary.metric == 'accuracy']['n'] == 2).all()
    comparison = json.loads(paths['comparison'].read_text())
    assert 'tally' in comparison['statistical_tests']['subpopulation']
    assert paths['accuracy_plot'].suffix == '.svg'


def test_report_needs_runs(tmp_path):
    with pytest.raises(ConfigError):
        build_report([], tmp_path)
    with pytest.raises(FileNotFoundError):
        build_report([tmp_path / 'missing'], tmp_path)


@pytest.mark.slow
def test_default_subpopulation_experiment(tmp_path):
    config = Config('config/config.yaml', {'experiment': {'seeds': [0]}, 'output': {'progress': False}})
    exp = ExperimentConfig.from_config(config)
    report = run_experiment(exp, 0, tmp_path)
    assert report.average_accuracy > 1.0 / exp.dataset.num_classes
    assert report.I_kl is not None
