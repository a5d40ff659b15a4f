"""
Experiment Runner Module
Resolved experiment configs, single runs under both protocols, checkpoint
evaluation, (method, seed) sweeps and cross-run reports
"""

import hashlib
import json
import re
import time
from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import pandas as pd
from joblib import Parallel, delayed

from src.autodiff.tensor import set_check_finite
from src.data.dataset_io import load_dataset, save_dataset, splits_at_storage_precision
from src.data.synthetic_generator import DatasetSpec, DatasetSplits, generate, leave_one_domain_out
from src.metrics.metric_calculator import MetricCalculator, RunReport
from src.models.network import NetworkConfig
from src.training.checkpoint import load_checkpoint, read_checkpoint_manifest, save_checkpoint
from src.training.trainer import TrainConfig, Trainer, new_state
from src.utils.config import Config, canonical_json
from src.utils.errors import ConfigError
from src.utils.logger import get_logger
from src.visualization.report_visualizer import ReportVisualizer

logger = get_logger(__name__)

# method -> trainer kind and the training settings it pins
METHODS: Dict[str, Dict[str, Any]] = {
    'erm': {'kind': 'erm', 'train': {'sampler': 'empirical'}},
    'erm_balanced': {'kind': 'erm', 'train': {'sampler': 'group_balanced'}},
    'focal': {'kind': 'erm', 'train': {'sampler': 'empirical', 'loss': 'focal'}},
    'tally': {'kind': 'tally', 'train': {'augmentation': 'full'}},
    'tally_none': {'kind': 'tally', 'train': {'augmentation': 'none'}},
    'tally_c_only': {'kind': 'tally', 'train': {'augmentation': 'c_only'}},
    'tally_d_only': {'kind': 'tally', 'train': {'augmentation': 'd_only'}},
}
PROTOCOL_ALIASES = {'subpop': 'subpopulation', 'subpopulation': 'subpopulation',
                    'domainshift': 'domain_shift', 'domain_shift': 'domain_shift'}
NETWORK_KEYS = ('hidden_channels', 'conv_blocks_before_r', 'conv_blocks_after_r')


def parse_seeds(text: Union[str, Sequence[int], int]) -> List[int]:
    """'0..4' (inclusive), '0,2,5' or a single integer"""
    if isinstance(text, int):
        return [text]
    if not isinstance(text, str):
        return [int(s) for s in text]
    text = text.strip()
    match = re.fullmatch(r'(-?\d+)\s*\.\.\s*(-?\d+)', text)
    if match:
        start, stop = int(match.group(1)), int(match.group(2))
        if stop < start:
            raise ConfigError(f"empty seed range '{text}'")
        return list(range(start, stop + 1))
    try:
        seeds = [int(part) for part in text.split(',') if part.strip()]
    except ValueError as e:
        raise ConfigError(f"cannot parse seeds '{text}'") from e
    if not seeds:
        raise ConfigError("seed list is empty")
    return seeds


def normalize_protocol(name: str) -> str:
    if name not in PROTOCOL_ALIASES:
        raise ConfigError(f"unknown protocol '{name}', expected subpop or domainshift")
    return PROTOCOL_ALIASES[name]


@dataclass
class ExperimentConfig:
    """A fully resolved experiment: data, network, training, method, protocol, seeds"""

    dataset: DatasetSpec
    train: TrainConfig
    network: Dict[str, int]
    method: str = 'tally'
    methods: List[str] = field(default_factory=lambda: ['erm', 'tally'])
    protocol: str = 'subpopulation'
    seeds: List[int] = field(default_factory=lambda: [0])
    dataset_path: Optional[str] = None
    evaluation: Dict[str, Any] = field(default_factory=dict)
    check_finite: bool = False
    output_dir: str = 'results'
    progress: bool = False
    n_jobs: int = 1
    plots: bool = True

    def validate(self) -> 'ExperimentConfig':
        for method in [self.method] + list(self.methods):
            if method not in METHODS:
                raise ConfigError(f"unknown method '{method}', expected one of {sorted(METHODS)}")
        self.protocol = normalize_protocol(self.protocol)
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        for key in NETWORK_KEYS:
            if int(self.network.get(key, 1)) < 1:
                raise ConfigError(f"network.{key} must be >= 1")
        for method in [self.method] + list(self.methods):
            if METHODS[method]['kind'] == 'erm' and (self.train.mix_original > 0 or self.train.detach_nuisance):
                raise ConfigError(f"method '{method}' trains without augmentation; "
                                  f"mix_original / detach_nuisance do not apply")
        self.train.validate()
        self.dataset.validate()
        return self

    @classmethod
    def from_config(cls, config: Config, overrides: Optional[Dict[str, Any]] = None) -> 'ExperimentConfig':
        """Build from the framework config; overrides use the same section layout"""
        if overrides:
            config.merge(overrides)
        dataset = config.section('dataset')
        experiment = config.section('experiment')
        output = config.section('output')
        return cls(
            dataset=DatasetSpec.from_dict(dataset),
            dataset_path=dataset.get('path'),
            train=TrainConfig.from_dict(config.section('training')),
            network={k: int(v) for k, v in config.section('network').items() if k in NETWORK_KEYS},
            method=experiment.get('method', 'tally'),
            methods=list(experiment.get('methods', ['erm', 'tally'])),
            protocol=experiment.get('protocol', 'subpopulation'),
            seeds=parse_seeds(experiment.get('seeds', [0])),
            evaluation=config.section('evaluation'),
            check_finite=bool(config.section('numerics').get('check_finite', False)),
            output_dir=str(output.get('results_dir', 'results')),
            progress=bool(output.get('progress', False)),
            n_jobs=int(output.get('n_jobs', 1)),
            plots=bool(output.get('plots', True)),
        ).validate()

    def for_method(self, method: str) -> 'ExperimentConfig':
        return replace(self, method=method).validate()

    def train_config(self) -> TrainConfig:
        """Training settings with the method's pinned values applied"""
        pinned = METHODS[self.method]['train']
        return TrainConfig.from_dict({**self.train.to_dict(), **pinned})

    def network_config(self, spec: DatasetSpec) -> NetworkConfig:
        return NetworkConfig(in_channels=spec.channels, num_classes=spec.num_classes,
                             image_side=spec.image_side, **self.network).validate()

    def resolved(self, seed: int) -> Dict[str, Any]:
        """Everything that determines a run's results; output locations excluded"""
        return {
            'method': self.method,
            'kind': METHODS[self.method]['kind'],
            'protocol': self.protocol,
            'seed': int(seed),
            'dataset': self.dataset.to_dict(),
            'network': dict(sorted(self.network.items())),
            'train': self.train_config().to_dict(),
            'evaluation': self.evaluation,
            'check_finite': self.check_finite,
        }


def config_hash(resolved: Dict[str, Any]) -> str:
    return hashlib.sha256(canonical_json(resolved).encode('utf-8')).hexdigest()


def _write_json(path: Path, payload: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write('\n')


def generate_dataset(spec: DatasetSpec, out_dir: Union[str, Path], n_jobs: int = 1) -> Path:
    """Generate all splits and write them as a dataset container"""
    splits = generate(spec, n_jobs=n_jobs)
    path = save_dataset(splits, out_dir)
    measured = splits.train.measured_imbalance()
    logger.info("Measured imbalance per domain: " + ", ".join(f"{r:.2f}" for r in measured))
    return path


def load_splits(exp: ExperimentConfig) -> DatasetSplits:
    """Dataset from disk, or generated in memory at on-disk precision"""
    if exp.dataset_path:
        splits = load_dataset(exp.dataset_path)
        exp.dataset = splits.spec
        return splits
    return splits_at_storage_precision(generate(exp.dataset))


def _train_one(exp: ExperimentConfig, seed: int, train_set, val_set, run_dir: Path,
               metadata: Dict[str, Any]):
    network_config = exp.network_config(exp.dataset)
    state = new_state(METHODS[exp.method]['kind'], train_set, exp.train_config(), network_config, seed)
    log_path = run_dir / 'train_log.jsonl'
    if log_path.exists():
        log_path.unlink()
    Trainer(train_set, state, val_set, log_path, exp.progress).run()
    save_checkpoint(state, run_dir / 'checkpoint', metadata=metadata)
    return state


def run_experiment(exp: ExperimentConfig, seed: int, run_dir: Union[str, Path],
                   splits: Optional[DatasetSplits] = None) -> RunReport:
    """Train and evaluate one (method, seed) cell under the configured protocol"""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    started = datetime.now()
    clock = time.perf_counter()
    set_check_finite(exp.check_finite)

    splits = splits if splits is not None else load_splits(exp)
    resolved = exp.resolved(seed)
    digest = config_hash(resolved)
    _write_json(run_dir / 'config.json', resolved)
    calculator = MetricCalculator.from_config(exp.evaluation)
    logger.info(f"Run {exp.method} seed {seed} [{exp.protocol}] -> {run_dir}")

    if exp.protocol == 'subpopulation':
        state = _train_one(exp, seed, splits.train, splits.val, run_dir,
                           {'method': exp.method, 'protocol': exp.protocol, 'held_out': None})
        report = calculator.evaluate(state.network, splits.test, exp.protocol,
                                     splits.train.class_counts(), exp.method, seed)
    else:
        folds = []
        for held_out in range(splits.train.num_domains):
            train_set, test_set = leave_one_domain_out(splits.train, held_out, test_pool=splits.test)
            val_set, _ = leave_one_domain_out(splits.val, held_out) if len(splits.val) else (None, None)
            fold_dir = run_dir / f"fold{held_out}"
            state = _train_one(exp, seed, train_set, val_set, fold_dir,
                               {'method': exp.method, 'protocol': exp.protocol, 'held_out': held_out})
            folds.append(calculator.evaluate(state.network, test_set, exp.protocol,
                                             train_set.class_counts(), exp.method, seed))
        report = calculator.combine_folds(folds, exp.method, seed)

    report.config_hash = digest
    report.config = resolved
    _write_json(run_dir / 'report.json', report.to_dict())
    _write_json(run_dir / 'meta.json', {
        'started': started.isoformat(),
        'finished': datetime.now().isoformat(),
        'seconds': round(time.perf_counter() - clock, 3),
        'run_dir': str(run_dir),
    })
    return report


def evaluate_checkpoint(checkpoint_dir: Union[str, Path], dataset_path: Union[str, Path],
                        protocol: str = 'subpopulation', held_out: Optional[int] = None,
                        evaluation: Optional[Dict[str, Any]] = None) -> RunReport:
    """Evaluate a saved network on a dataset container's test split"""
    protocol = normalize_protocol(protocol)
    splits = load_dataset(dataset_path)
    manifest = read_checkpoint_manifest(checkpoint_dir)
    metadata = manifest.get('metadata', {})
    state = load_checkpoint(checkpoint_dir)
    if state.network.config.num_classes != splits.spec.num_classes:
        raise ConfigError("checkpoint and dataset disagree on the number of classes")

    calculator = MetricCalculator.from_config(evaluation or {})
    method = metadata.get('method', '')
    if protocol == 'subpopulation':
        return calculator.evaluate(state.network, splits.test, protocol,
                                   splits.train.class_counts(), method, state.seed)

    held_out = held_out if held_out is not None else metadata.get('held_out')
    if held_out is None:
        raise ConfigError("domain-shift evaluation needs the held-out domain (--held-out)")
    train_set, test_set = leave_one_domain_out(splits.train, int(held_out), test_pool=splits.test)
    return calculator.evaluate(state.network, test_set, protocol, train_set.class_counts(),
                               method, state.seed)


def run_dir_name(method: str, seed: int) -> str:
    return f"{method}_seed{seed}"


def _run_cell(exp: ExperimentConfig, method: str, seed: int, out_dir: str) -> str:
    run_dir = Path(out_dir) / run_dir_name(method, seed)
    run_experiment(exp.for_method(method), seed, run_dir)
    return str(run_dir)


def run_sweep(exp: ExperimentConfig, methods: Optional[Sequence[str]] = None,
              seeds: Optional[Sequence[int]] = None, out_dir: Optional[Union[str, Path]] = None,
              n_jobs: Optional[int] = None) -> List[Path]:
    """Every (method, seed) cell in its own directory; cells run in a joblib pool"""
    methods = list(methods or exp.methods)
    seeds = list(seeds if seeds is not None else exp.seeds)
    out = Path(out_dir or exp.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for method in methods:
        if method not in METHODS:
            raise ConfigError(f"unknown method '{method}'")

    if not exp.dataset_path:
        exp = replace(exp, dataset_path=str(generate_dataset(exp.dataset, out / 'dataset')))

    logger.info(f"Sweep: {len(methods)} methods x {len(seeds)} seeds = {len(methods) * len(seeds)} runs")
    jobs = n_jobs if n_jobs is not None else exp.n_jobs
    run_dirs = Parallel(n_jobs=jobs)(
        delayed(_run_cell)(exp, method, seed, str(out)) for method in methods for seed in seeds)
    return [Path(p) for p in run_dirs]


def collect_reports(run_dirs: Sequence[Union[str, Path]]) -> List[RunReport]:
    reports = []
    for run_dir in run_dirs:
        path = Path(run_dir) / 'report.json'
        if not path.exists():
            raise FileNotFoundError(f"no report.json in {run_dir}")
        with open(path, 'r') as f:
            reports.append(RunReport.from_dict(json.load(f)))
    return reports


def build_report(run_dirs: Sequence[Union[str, Path]], out_dir: Union[str, Path],
                 plots: bool = True, baseline: str = 'erm') -> Dict[str, Path]:
    """runs.csv, summary.csv (mean and sample std), comparison.json and SVG plots"""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports = collect_reports(run_dirs)
    if not reports:
        raise ConfigError("no run directories to report on")

    rows = pd.DataFrame([r.to_row() for r in reports]).sort_values(['protocol', 'method', 'seed'])
    calculator = MetricCalculator()
    summary = calculator.summarize_runs(rows)
    comparison = calculator.compare_models(rows, baseline=baseline)

    paths = {'runs': out / 'runs.csv', 'summary': out / 'summary.csv', 'comparison': out / 'comparison.json'}
    rows.to_csv(paths['runs'], index=False)
    summary.to_csv(paths['summary'], index=False)
    _write_json(paths['comparison'], comparison)

    if plots:
        paths.update(ReportVisualizer(out).create_comparative_plots(rows))
    logger.info(f"Report over {len(reports)} runs written to {out}")
    return paths
