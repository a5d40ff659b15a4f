"""Tests for directory checkpoints and bit-exact resumption"""

import json
from dataclasses import replace

import numpy as np
import pytest

from src.training.checkpoint import (CHECKPOINT_FORMAT_VERSION, load_checkpoint, read_checkpoint_manifest,
                                     save_checkpoint)
from src.training.trainer import Trainer, new_state, train_erm, train_tally
from src.utils.errors import ConfigError, FormatError


@pytest.mark.parametrize("kind", ['erm', 'tally'])
def test_resume_from_checkpoint_is_bit_exact(kind, tiny_splits, tiny_network_config, fast_train_config,
                                             tmp_path):
    train = train_erm if kind == 'erm' else train_tally
    reference = train(tiny_splits.train, fast_train_config, tiny_network_config, seed=7)

    state = new_state(kind, tiny_splits.train, fast_train_config, tiny_network_config, seed=7)
    Trainer(tiny_splits.train, state).run(max_steps=6)
    save_checkpoint(state, tmp_path / 'ckpt')
    resumed = load_checkpoint(tmp_path / 'ckpt', expected_network=tiny_network_config)
    assert resumed.step == 6
    Trainer(tiny_splits.train, resumed).run()

    np.testing.assert_array_equal(resumed.network.get_flat_parameters(),
                                  reference.network.get_flat_parameters())
    np.testing.assert_array_equal(resumed.optimizer.velocity_flat(), reference.optimizer.velocity_flat())
    assert resumed.history == reference.history
    if kind == 'tally':
        np.testing.assert_array_equal(resumed.bank.r, reference.bank.r)


def test_identical_runs_write_identical_bytes(tiny_splits, tiny_network_config, fast_train_config, tmp_path):
    for name in ('a', 'b'):
        state = train_tally(tiny_splits.train, fast_train_config, tiny_network_config, seed=1)
        save_checkpoint(state, tmp_path / name, metadata={'method': 'tally'})
    for blob in ('manifest.json', 'parameters.bin', 'momentum.bin', 'bank.bin'):
        assert (tmp_path / 'a' / blob).read_bytes() == (tmp_path / 'b' / blob).read_bytes()


def test_manifest_describes_layout(tiny_splits, tiny_network_config, fast_train_config, tmp_path):
    state = train_erm(tiny_splits.train, fast_train_config, tiny_network_config, seed=0)
    save_checkpoint(state, tmp_path, metadata={'method': 'erm', 'held_out': None})
    manifest = read_checkpoint_manifest(tmp_path)
    assert manifest['format_version'] == CHECKPOINT_FORMAT_VERSION
    assert manifest['metadata'] == {'method': 'erm', 'held_out': None}
    assert 'bank' not in manifest
    assert (tmp_path / 'parameters.bin').stat().st_size == 8 * tiny_network_config.parameter_count()
    assert [name for name, _ in manifest['parameter_layout']][0] == 'pre.0.weight'


def test_mismatched_network_is_refused(tiny_splits, tiny_network_config, fast_train_config, tmp_path):
    state = new_state('erm', tiny_splits.train, fast_train_config, tiny_network_config, seed=0)
    save_checkpoint(state, tmp_path)
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path, expected_network=replace(tiny_network_config, hidden_channels=4))


def test_corrupt_blob_is_refused(tiny_splits, tiny_network_config, fast_train_config, tmp_path):
    state = new_state('tally', tiny_splits.train, fast_train_config, tiny_network_config, seed=0)
    save_checkpoint(state, tmp_path)
    blob = bytearray((tmp_path / 'parameters.bin').read_bytes())
    blob[0] ^= 0x01
    (tmp_path / 'parameters.bin').write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="corrupt"):
        load_checkpoint(tmp_path)


def test_other_format_version_is_refused(tiny_splits, tiny_network_config, fast_train_config, tmp_path):
    state = new_state('erm', tiny_splits.train, fast_train_config, tiny_network_config, seed=0)
    save_checkpoint(state, tmp_path)
    manifest = json.loads((tmp_path / 'manifest.json').read_text())
    manifest['format_version'] = CHECKPOINT_FORMAT_VERSION + 1
    (tmp_path / 'manifest.json').write_text(json.dumps(manifest))
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / 'absent')
