"""Tests for pair and batch sampling strategies"""

import numpy as np
import pytest
from scipy.stats import chisquare

from src.sampling.pair_sampler import (MAX_EMPTY_GROUP_RETRIES, SAMPLER_STRATEGIES, GroupIndex,
                                       PairSampler, SamplerConfig, draw_warmstart_batch)
from src.utils.errors import ConfigError, SamplingError

ALPHA = 0.001
DRAWS = 10_000

# rows are classes, columns domains
COUNTS = np.array([[50, 1], [5, 20], [2, 8]])


def index_from_counts(counts):
    labels, domains = [], []
    for c in range(counts.shape[0]):
        for d in range(counts.shape[1]):
            labels += [c] * int(counts[c, d])
            domains += [d] * int(counts[c, d])
    return GroupIndex(np.array(labels), np.array(domains), counts.shape[0], counts.shape[1])


def sampler(strategy, index, seed=0):
    return PairSampler(index, SamplerConfig(strategy=strategy, seed=seed), np.random.default_rng(seed))


def test_group_index_counts_and_imbalance():
    index = index_from_counts(COUNTS)
    np.testing.assert_array_equal(index.counts, COUNTS)
    assert index.size == COUNTS.sum()
    assert [len(m) for m in index.by_class] == [51, 25, 10]
    assert [len(m) for m in index.by_domain] == [57, 29]
    np.testing.assert_allclose(index.imbalance_ratios(), [25.0, 20.0])


def test_selective_marginals_are_uniform():
    """Test that y_i is uniform over classes and d_j uniform over domains"""
    index = index_from_counts(COUNTS)
    i_idx, j_idx = sampler('selective', index).draw_pairs(DRAWS)
    class_freq = np.bincount(index.labels[i_idx], minlength=3)
    domain_freq = np.bincount(index.domains[j_idx], minlength=2)
    assert chisquare(class_freq).pvalue > ALPHA
    assert chisquare(domain_freq).pvalue > ALPHA


def test_selective_draws_uniformly_inside_a_class():
    index = index_from_counts(COUNTS)
    i_idx, _ = sampler('selective', index, seed=1).draw_pairs(DRAWS)
    members = index.by_class[2]
    hits = i_idx[np.isin(i_idx, members)]
    freq = np.array([np.sum(hits == m) for m in members])
    assert chisquare(freq).pvalue > ALPHA


@pytest.mark.parametrize("strategy", ['group_balanced', 'algorithm1_uniform'])
def test_balanced_strategies_are_jointly_uniform_over_cells(strategy):
    index = index_from_counts(COUNTS)
    i_idx, j_idx = sampler(strategy, index, seed=2).draw_pairs(DRAWS // 2)
    drawn = np.concatenate([i_idx, j_idx])
    cells = index.labels[drawn] * 2 + index.domains[drawn]
    assert chisquare(np.bincount(cells, minlength=6)).pvalue > ALPHA


@pytest.mark.parametrize("strategy", ['group_balanced', 'algorithm1_uniform'])
def test_balanced_strategies_skip_empty_cells(strategy):
    counts = np.array([[4, 0], [3, 5]])
    index = index_from_counts(counts)
    drawn = sampler(strategy, index, seed=3).draw_examples(3000)
    cells = index.labels[drawn] * 2 + index.domains[drawn]
    freq = np.bincount(cells, minlength=4)
    assert freq[1] == 0
    assert chisquare(freq[[0, 2, 3]]).pvalue > ALPHA


def test_empirical_pairs_follow_the_data():
    index = index_from_counts(COUNTS)
    i_idx, _ = sampler('empirical', index, seed=4).draw_pairs(DRAWS)
    expected = COUNTS.sum(axis=1) / COUNTS.sum() * DRAWS
    observed = np.bincount(index.labels[i_idx], minlength=3)
    assert chisquare(observed, expected).pvalue > ALPHA


@pytest.mark.parametrize("strategy", SAMPLER_STRATEGIES)
def test_degenerate_index_gives_uniform_ordered_pairs(strategy):
    index = GroupIndex(np.zeros(3, dtype=int), np.zeros(3, dtype=int), 1, 1)
    i_idx, j_idx = sampler(strategy, index, seed=5).draw_pairs(9000)
    assert chisquare(np.bincount(i_idx * 3 + j_idx, minlength=9)).pvalue > ALPHA


@pytest.mark.parametrize("strategy", SAMPLER_STRATEGIES)
def test_same_seed_same_draws(strategy):
    index = index_from_counts(COUNTS)
    a = sampler(strategy, index, seed=11).draw_pairs(50)
    b = sampler(strategy, index, seed=11).draw_pairs(50)
    c = sampler(strategy, index, seed=12).draw_pairs(50)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
    assert not np.array_equal(a[0], c[0])


def test_warmstart_batches_are_uniform_with_replacement():
    index = index_from_counts(np.array([[3, 2], [1, 4]]))
    rng = np.random.default_rng(6)
    n, rounds = index.size, 1000
    batches = np.stack([draw_warmstart_batch(index, n, rng) for _ in range(rounds)])
    assert chisquare(np.bincount(batches.ravel(), minlength=n)).pvalue > ALPHA
    # with replacement: some batch repeats an example
    assert any(len(np.unique(b)) < n for b in batches)


def test_warmstart_single_example():
    index = GroupIndex(np.array([0]), np.array([0]), 1, 1)
    assert draw_warmstart_batch(index, 1, np.random.default_rng(0)).tolist() == [0]


def test_empty_dataset_is_rejected():
    empty = GroupIndex(np.zeros(0, dtype=int), np.zeros(0, dtype=int), 2, 2)
    with pytest.raises(SamplingError):
        sampler('empirical', empty)
    with pytest.raises(SamplingError):
        draw_warmstart_batch(empty, 4, np.random.default_rng(0))


def test_selective_needs_every_class_and_domain():
    index = index_from_counts(np.array([[3, 2], [0, 0]]))
    with pytest.raises(SamplingError):
        sampler('selective', index)
    # group-balanced only needs some populated cell
    assert len(sampler('group_balanced', index).draw_examples(4)) == 4


def test_exhausted_retries_raise_sampling_error():
    index = index_from_counts(np.array([[1, 1], [1, 1]]))
    index.groups = {key: np.zeros(0, dtype=np.int64) for key in index.groups}
    with pytest.raises(SamplingError, match=str(MAX_EMPTY_GROUP_RETRIES)):
        sampler('group_balanced', index).draw_pair()


def test_unknown_strategy_is_a_config_error():
    with pytest.raises(ConfigError):
        SamplerConfig(strategy='round_robin').validate()
