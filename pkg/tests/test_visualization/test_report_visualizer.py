"""Tests for the SVG comparison plots"""

import pandas as pd

from src.visualization.report_visualizer import ReportVisualizer


def _rows(with_buckets=True, with_invariance=True):
    rows = []
    for method, base in (('erm', 0.5), ('tally', 0.6)):
        for seed in range(3):
            row = {'method': method, 'protocol': 'subpopulation', 'seed': seed,
                   'average_accuracy': base + 0.01 * seed}
            if with_buckets:
                row.update({f"bucket_{b}": base - 0.05 * i for i, b in enumerate(('XL', 'L', 'M', 'S', 'XS'))})
            if with_invariance:
                row.update({'I_acc': 0.3, 'I_kl': 0.1 * seed})
            rows.append(row)
    return pd.DataFrame(rows)


def test_all_plots_are_written(tmp_path):
    paths = ReportVisualizer(tmp_path).create_comparative_plots(_rows())
    assert set(paths) == {'accuracy_plot', 'bucket_plot', 'invariance_plot'}
    for path in paths.values():
        assert path.exists()
        assert path.read_text().lstrip().startswith('<?xml')


def test_missing_metrics_skip_their_plots(tmp_path):
    paths = ReportVisualizer(tmp_path).create_comparative_plots(_rows(False, False))
    assert set(paths) == {'accuracy_plot'}


def test_plots_are_byte_identical_across_renders(tmp_path):
    first = ReportVisualizer(tmp_path / 'a').create_accuracy_bars(_rows())
    second = ReportVisualizer(tmp_path / 'b').create_accuracy_bars(_rows())
    assert first.read_bytes() == second.read_bytes()
