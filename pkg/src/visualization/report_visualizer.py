"""
Report Visualizer Module
SVG comparison plots over a sweep: accuracy per class-size bucket,
invariance per method, accuracy per method
"""

from pathlib import Path
from typing import Dict, List, Union

import matplotlib

matplotlib.use('Agg')

import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402
import seaborn as sns  # noqa: E402

from src.metrics.metric_calculator import BUCKETS  # noqa: E402
from src.utils.logger import get_logger  # noqa: E402

logger = get_logger(__name__)

# fixed ids and no creation date so repeated reports are byte-identical
plt.rcParams['svg.hashsalt'] = 'tally-lt'
SVG_METADATA = {'Date': None}


class ReportVisualizer:
    """Create comparison plots across methods"""

    def __init__(self, output_dir: Union[str, Path]):
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        sns.set_theme(style="whitegrid")

    def _save(self, fig, name: str) -> Path:
        path = self.output_dir / name
        fig.savefig(path, format='svg', metadata=SVG_METADATA, bbox_inches='tight')
        plt.close(fig)
        return path

    def create_comparative_plots(self, rows: pd.DataFrame) -> Dict[str, Path]:
        """Create all comparison plots; returns their paths by name"""
        paths = {'accuracy_plot': self.create_accuracy_bars(rows)}
        bucket_path = self.create_bucket_lines(rows)
        if bucket_path is not None:
            paths['bucket_plot'] = bucket_path
        invariance_path = self.create_invariance_bars(rows)
        if invariance_path is not None:
            paths['invariance_plot'] = invariance_path
        return paths

    def create_accuracy_bars(self, rows: pd.DataFrame) -> Path:
        """Average accuracy per method and protocol; error bars are sample std over seeds"""
        fig, ax = plt.subplots(figsize=(8, 4.5))
        sns.barplot(data=rows, x='method', y='average_accuracy', hue='protocol',
                    errorbar='sd', ax=ax)
        ax.set_ylim(0, 1)
        ax.set_xlabel('Method')
        ax.set_ylabel('Average accuracy')
        ax.set_title('Accuracy by method')
        return self._save(fig, 'accuracy_by_method.svg')

    def create_bucket_lines(self, rows: pd.DataFrame) -> Union[Path, None]:
        """Mean accuracy from the largest (XL) to the smallest (XS) classes"""
        columns: List[str] = [f"bucket_{b}" for b in BUCKETS if f"bucket_{b}" in rows.columns]
        if not columns or rows[columns].isna().all().all():
            logger.warning("No bucket accuracies in these runs; skipping bucket plot")
            return None
        long = rows[['method', 'protocol', 'seed'] + columns].melt(id_vars=['method', 'protocol', 'seed'], value_vars=columns,
                         var_name='bucket', value_name='accuracy').dropna()
        long['bucket'] = long['bucket'].str.replace('bucket_', '', regex=False)
        long['accuracy'] = pd.to_numeric(long['accuracy'])

        fig, ax = plt.subplots(figsize=(8, 4.5))
        sns.pointplot(data=long, x='bucket', y='accuracy', hue='method', order=list(BUCKETS),
                      errorbar='sd', dodge=0.3, ax=ax)
        ax.set_ylim(0, 1)
        ax.set_xlabel('Class-size bucket')
        ax.set_ylabel('Accuracy')
        ax.set_title('Accuracy by class size')
        return self._save(fig, 'bucket_accuracy.svg')

    def create_invariance_bars(self, rows: pd.DataFrame) -> Union[Path, None]:
        """I_acc and I_kl side by side per method (lower is more invariant)"""
        present = [m for m in ('I_acc', 'I_kl') if m in rows.columns and rows[m].notna().any()]
        if not present:
            logger.warning("No invariance metrics in these runs; skipping invariance plot")
            return None
        fig, axes = plt.subplots(1, len(present), figsize=(5 * len(present), 4.5), squeeze=False)
        for ax, metric in zip(axes[0], present):
            data = rows.dropna(subset=[metric]).astype({metric: float})
            sns.barplot(data=data, x='method', y=metric, errorbar='sd', ax=ax)
            ax.set_xlabel('Method')
            ax.set_ylabel(metric)
            ax.tick_params(axis='x', rotation=30)
        fig.suptitle('Domain invariance (lower is more invariant)')
        return self._save(fig, 'invariance.svg')
