"""
Metric Calculator Module
Accuracy under both evaluation protocols, macro F1, class-size buckets,
run reports and cross-method comparison
"""

from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import stats
from sklearn.metrics import f1_score

from src.data.synthetic_generator import Dataset
from src.metrics.invariance import LogitSamples, invariance_acc, invariance_kl
from src.models.network import Network
from src.utils.errors import ProtocolError
from src.utils.logger import get_logger

logger = get_logger(__name__)

REPORT_FORMAT_VERSION = 1
PROTOCOLS = ('subpopulation', 'domain_shift')
BUCKETS = ('XL', 'L', 'M', 'S', 'XS')
SUMMARY_METRICS = ('accuracy', 'average_accuracy', 'worst_domain_accuracy', 'macro_f1',
                   'I_acc', 'I_kl') + tuple(f"bucket_{b}" for b in BUCKETS)


def macro_f1(predictions: Sequence[int], labels: Sequence[int], num_classes: Optional[int] = None) -> float:
    """Unweighted mean of per-class F1; a class never true and never predicted scores 0"""
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("macro F1 of an empty prediction set")
    if predictions.shape != labels.shape:
        raise ValueError("predictions and labels must have equal length")
    if num_classes is None:
        num_classes = int(max(predictions.max(), labels.max())) + 1
    return float(f1_score(labels, predictions, labels=list(range(num_classes)),
                          average='macro', zero_division=0))


def per_class_accuracy(predictions: np.ndarray, labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Recall per class; NaN for classes absent from labels"""
    acc = np.full(num_classes, np.nan)
    for c in range(num_classes):
        mask = labels == c
        if mask.any():
            acc[c] = float(np.mean(predictions[mask] == c))
    return acc


def bucket_partition(train_counts: Sequence[int], num_buckets: int = len(BUCKETS)) -> List[np.ndarray]:
    """Classes sorted by training count (descending), cut into contiguous groups

    Leftover classes go to the later (smaller-class) buckets.
    """
    counts = np.asarray(train_counts)
    order = np.argsort(-counts, kind='stable')
    base, remainder = divmod(len(order), num_buckets)
    sizes = [base + (1 if b >= num_buckets - remainder else 0) for b in range(num_buckets)]
    groups, start = [], 0
    for size in sizes:
        groups.append(order[start:start + size])
        start += size
    return groups


def bucket_accuracy(class_acc: Sequence[float], train_counts: Sequence[int]) -> Dict[str, float]:
    """Mean class accuracy in each of the XL..XS size buckets

    With fewer than five classes the report falls back to one entry per class,
    keyed 'class_<id>' in descending size order.
    """
    class_acc = np.asarray(class_acc, dtype=np.float64)
    if len(class_acc) != len(train_counts):
        raise ValueError("one accuracy per class is required")
    if len(class_acc) < len(BUCKETS):
        logger.warning(f"{len(class_acc)} classes is too few for size buckets; reporting per class")
        order = np.argsort(-np.asarray(train_counts), kind='stable')
        return {f"class_{int(c)}": float(class_acc[c]) for c in order}
    # classes without test examples (NaN) drop out of their bucket
    return {name: _nanmean(class_acc[group])
            for name, group in zip(BUCKETS, bucket_partition(train_counts))}


def _nanmean(values: Sequence[float]) -> float:
    values = np.asarray(values, dtype=np.float64)
    present = values[~np.isnan(values)]
    return float(np.mean(present)) if len(present) else float(np.nan)


def validate_protocol(test_set: Dataset, protocol: str) -> None:
    """Balanced per (class, domain) cell for subpopulation, per class within each domain for domain shift"""
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol '{protocol}'")
    if len(test_set) == 0:
        raise ProtocolError("empty test set")
    counts = test_set.counts()
    if protocol == 'subpopulation':
        if counts.min() != counts.max():
            raise ProtocolError(f"subpopulation test set is unbalanced: cell counts range "
                                f"{counts.min()}..{counts.max()}")
        return
    for d in range(test_set.num_domains):
        present = counts[:, d]
        if present.sum() and present.min() != present.max():
            raise ProtocolError(f"domain-shift test domain {test_set.domain_ids[d]} is not class-balanced")


@dataclass
class RunReport:
    """Metrics of one evaluated run; serialised as report.json"""

    protocol: str
    method: str
    seed: int
    accuracy: float
    per_domain_accuracy: Dict[str, float]
    average_accuracy: float
    worst_domain_accuracy: float
    per_class_accuracy: List[Optional[float]]
    macro_f1: float
    buckets: Dict[str, float]
    I_acc: Optional[float] = None
    I_kl: Optional[float] = None
    invariance_settings: Dict[str, Any] = field(default_factory=dict)
    folds: List[Dict[str, Any]] = field(default_factory=list)
    config_hash: str = ''
    config: Dict[str, Any] = field(default_factory=dict)
    format_version: int = REPORT_FORMAT_VERSION

    def to_dict(self) -> Dict[str, Any]:
        return _finite_or_none(asdict(self))

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RunReport':
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def to_row(self) -> Dict[str, Any]:
        """Flat record for CSV aggregation, one per (method, protocol, seed)"""
        row = {'method': self.method, 'protocol': self.protocol, 'seed': self.seed,
               'accuracy': self.accuracy, 'average_accuracy': self.average_accuracy,
               'worst_domain_accuracy': self.worst_domain_accuracy, 'macro_f1': self.macro_f1,
               'I_acc': self.I_acc, 'I_kl': self.I_kl, 'config_hash': self.config_hash}
        for name in BUCKETS:
            row[f"bucket_{name}"] = self.buckets.get(name)
        return row


def _numeric(rows: pd.DataFrame, columns: List[str]) -> pd.DataFrame:
    rows = rows.copy()
    rows[columns] = rows[columns].apply(pd.to_numeric, errors='coerce')
    return rows


def _finite_or_none(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _finite_or_none(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_finite_or_none(v) for v in value]
    if isinstance(value, (float, np.floating)):
        return float(value) if np.isfinite(value) else None
    if isinstance(value, np.integer):
        return int(value)
    return value


class MetricCalculator:
    """Evaluate a network snapshot and compare methods across seeds"""

    def __init__(self, invariance: bool = True, kl_min_samples: int = 5, logreg_l2: float = 1e-3,
                 logreg_tol: float = 1e-6, logreg_max_iter: int = 10000, holdout_fraction: float = 0.2):
        self.invariance = invariance
        self.kl_min_samples = kl_min_samples
        self.logreg_l2 = logreg_l2
        self.logreg_tol = logreg_tol
        self.logreg_max_iter = logreg_max_iter
        self.holdout_fraction = holdout_fraction

    @classmethod
    def from_config(cls, evaluation: Dict[str, Any]) -> 'MetricCalculator':
        return cls(invariance=evaluation.get('invariance', True),
                   kl_min_samples=evaluation.get('kl_min_samples', 5),
                   logreg_l2=evaluation.get('logreg_l2', 1e-3),
                   logreg_tol=evaluation.get('logreg_tol', 1e-6),
                   logreg_max_iter=evaluation.get('logreg_max_iter', 10000),
                   holdout_fraction=evaluation.get('holdout_fraction', 0.2))

    def calculate_metrics(self, logits: np.ndarray, test_set: Dataset,
                          train_counts: Optional[Sequence[int]] = None, seed: int = 0,
                          invariance: Optional[bool] = None) -> Dict[str, Any]:
        """Accuracy, F1, buckets and invariance from precomputed logits"""
        predictions = np.argmax(logits, axis=1)
        labels = test_set.y
        correct = predictions == labels

        per_domain = {}
        for d in range(test_set.num_domains):
            mask = test_set.d == d
            if mask.any():
                per_domain[str(test_set.domain_ids[d])] = float(np.mean(correct[mask]))
        class_acc = per_class_accuracy(predictions, labels, test_set.num_classes)
        counts = train_counts if train_counts is not None else np.ones(test_set.num_classes)

        metrics = {
            'accuracy': float(np.mean(correct)),
            'per_domain_accuracy': per_domain,
            'average_accuracy': float(np.mean(list(per_domain.values()))),
            'worst_domain_accuracy': float(min(per_domain.values())),
            'per_class_accuracy': [None if np.isnan(a) else float(a) for a in class_acc],
            'macro_f1': macro_f1(predictions, labels, test_set.num_classes),
            'buckets': bucket_accuracy(class_acc, counts),
            'I_acc': None,
            'I_kl': None,
            'invariance_settings': {},
        }
        use_invariance = self.invariance if invariance is None else invariance
        if use_invariance:
            metrics.update(self._invariance_metrics(logits, test_set, seed))
        return metrics

    def _invariance_metrics(self, logits: np.ndarray, test_set: Dataset, seed: int) -> Dict[str, Any]:
        samples = LogitSamples(logits, test_set.y, test_set.d)
        out: Dict[str, Any] = {'invariance_settings': {
            'probe': {'l2': self.logreg_l2, 'tol': self.logreg_tol, 'max_iter': self.logreg_max_iter,
                      'holdout_fraction': self.holdout_fraction, 'solver': 'lbfgs'}}}
        try:
            out['I_acc'] = invariance_acc(samples, test_set.num_domains, self.logreg_l2, self.logreg_tol,
                                          self.logreg_max_iter, self.holdout_fraction, seed)
        except ValueError as e:
            logger.warning(f"I_acc skipped: {e}")
        try:
            value, settings = invariance_kl(samples, test_set.num_classes, test_set.num_domains,
                                            self.kl_min_samples)
            out['I_kl'] = value
            out['invariance_settings']['kl'] = settings
        except ValueError as e:
            logger.warning(f"I_kl skipped: {e}")
        return out

    def evaluate(self, network: Network, test_set: Dataset, protocol: str,
                 train_counts: Optional[Sequence[int]] = None, method: str = '', seed: int = 0) -> RunReport:
        """Argmax accuracy overall, per domain and per class, plus F1, buckets and invariance"""
        validate_protocol(test_set, protocol)
        logits = network.predict_logits(test_set.x)
        # a held-out fold has a single domain, nothing to probe
        metrics = self.calculate_metrics(logits, test_set, train_counts, seed,
                                         invariance=self.invariance and protocol == 'subpopulation')
        logger.info(f"{method or 'network'} [{protocol}] accuracy={metrics['accuracy']:.4f} "
                    f"macro_f1={metrics['macro_f1']:.4f} worst={metrics['worst_domain_accuracy']:.4f}")
        return RunReport(protocol=protocol, method=method, seed=seed, **metrics)

    def combine_folds(self, fold_reports: List[RunReport], method: str, seed: int) -> RunReport:
        """Leave-one-domain-out folds summarised as one report; each fold is one held-out domain"""
        if not fold_reports:
            raise ValueError("no folds to combine")
        per_domain = {}
        for report in fold_reports:
            per_domain.update(report.per_domain_accuracy)
        class_acc = np.array([[np.nan if a is None else a for a in r.per_class_accuracy]
                              for r in fold_reports])
        buckets = {name: _nanmean([r.buckets[name] for r in fold_reports])
                   for name in fold_reports[0].buckets}
        return RunReport(
            protocol='domain_shift', method=method, seed=seed,
            accuracy=float(np.mean([r.accuracy for r in fold_reports])),
            per_domain_accuracy=per_domain,
            average_accuracy=float(np.mean(list(per_domain.values()))),
            worst_domain_accuracy=float(min(per_domain.values())),
            per_class_accuracy=[None if np.all(np.isnan(col)) else float(np.nanmean(col))
                                for col in class_acc.T],
            macro_f1=float(np.mean([r.macro_f1 for r in fold_reports])),
            buckets=buckets,
            folds=[r.to_dict() for r in fold_reports])

    def summarize_runs(self, rows: pd.DataFrame) -> pd.DataFrame:
        """Mean and sample standard deviation (ddof=1) per method x protocol x metric"""
        metrics = [m for m in SUMMARY_METRICS if m in rows.columns]
        rows = _numeric(rows, metrics)
        long = rows.melt(id_vars=['method', 'protocol', 'seed'], value_vars=metrics,
                         var_name='metric', value_name='value').dropna(subset=['value'])
        summary = (long.groupby(['method', 'protocol', 'metric'])['value']
                   .agg(mean='mean', std=lambda v: v.std(ddof=1), n='count')
                   .reset_index())
        return summary.sort_values(['protocol', 'method', 'metric']).reset_index(drop=True)

    def compare_models(self, rows: pd.DataFrame, baseline: str = 'erm') -> Dict[str, Any]:
        """Each method against the baseline over shared seeds"""
        comparison: Dict[str, Any] = {'baseline': baseline, 'rankings': {}, 'statistical_tests': {}}
        rows = _numeric(rows, [m for m in SUMMARY_METRICS if m in rows.columns])
        for protocol, frame in rows.groupby('protocol'):
            means = frame.groupby('method')['average_accuracy'].mean().sort_values(ascending=False)
            comparison['rankings'][protocol] = [[m, float(v)] for m, v in means.items()]
            if baseline in frame['method'].values:
                comparison['statistical_tests'][protocol] = self._perform_statistical_tests(frame, baseline)
        return _finite_or_none(comparison)

    def _perform_statistical_tests(self, frame: pd.DataFrame, baseline: str) -> Dict[str, Any]:
        """One-sided paired t-tests (method > baseline) and per-bucket gains"""
        tests = {}
        base = frame[frame['method'] == baseline].set_index('seed')
        for method, group in frame.groupby('method'):
            if method == baseline:
                continue
            paired = group.set_index('seed').join(base, rsuffix='_base', how='inner')
            result: Dict[str, Any] = {'n_seeds': int(len(paired))}
            for metric in ('average_accuracy', 'accuracy', 'worst_domain_accuracy', 'macro_f1'):
                diff = paired[metric] - paired[f"{metric}_base"]
                entry = {'mean_gain': float(diff.mean()) if len(diff) else None}
                if len(paired) >= 2 and diff.std(ddof=1) > 0:
                    test = stats.ttest_rel(paired[metric], paired[f"{metric}_base"], alternative='greater')
                    entry.update(t=float(test.statistic), p_value=float(test.pvalue))
                result[metric] = entry
            for name in BUCKETS:
                column = f"bucket_{name}"
                if column in paired and paired[column].notna().any():
                    result[f"gain_{name}"] = float((paired[column] - paired[f"{column}_base"]).mean())
            if 'gain_XS' in result and 'gain_XL' in result:
                result['tail_gain_exceeds_head_gain'] = bool(result['gain_XS'] > result['gain_XL'])
            tests[method] = result
        return tests
