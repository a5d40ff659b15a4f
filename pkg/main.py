"""
TALLY long-tailed multi-domain experiments
Command-line entry point: generate datasets, train, evaluate, sweep and report
"""

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml

from src.experiments.experiment_runner import (METHODS, ExperimentConfig, build_report,
                                               evaluate_checkpoint, generate_dataset, parse_seeds,
                                               run_dir_name, run_experiment, run_sweep)
from src.metrics.metric_calculator import RunReport
from src.sampling.pair_sampler import SAMPLER_STRATEGIES
from src.utils.config import Config
from src.utils.errors import EXIT_CONFIG_ERROR, EXIT_OK, EXIT_RUNTIME_ERROR, ConfigError, TallyError
from src.utils.logger import setup_logger

logger = setup_logger(__name__)


class TallyFramework:
    """Ties the configuration to dataset generation, training, evaluation and reporting"""

    def __init__(self, config_path: Optional[str] = "config/config.yaml",
                 overrides: Optional[Dict[str, Any]] = None):
        """Initialize the framework with configuration"""
        self.config = Config(config_path, overrides)
        log = self.config.section('logging')
        setup_logger('src', log.get('file'), log.get('level', 'INFO'))
        setup_logger(__name__, log.get('file'), log.get('level', 'INFO'))
        self.experiment = ExperimentConfig.from_config(self.config)

    @property
    def output_dir(self) -> Path:
        return Path(self.experiment.output_dir)

    def generate(self, out_dir: Optional[str] = None) -> Path:
        path = generate_dataset(self.experiment.dataset, out_dir or self.output_dir / 'dataset',
                                n_jobs=self.experiment.n_jobs)
        logger.info(f"Dataset ready at {path}")
        return path

    def train(self, out_dir: Optional[str] = None) -> List[RunReport]:
        """Train and evaluate the configured method once per seed"""
        out = Path(out_dir) if out_dir else self.output_dir
        reports = []
        for seed in self.experiment.seeds:
            run_dir = out / run_dir_name(self.experiment.method, seed)
            report = run_experiment(self.experiment, seed, run_dir)
            logger.info(f"{self.experiment.method} seed {seed}: average accuracy "
                        f"{report.average_accuracy:.4f}, worst domain {report.worst_domain_accuracy:.4f}")
            reports.append(report)
        return reports

    def evaluate(self, checkpoint: str, dataset: str, protocol: str,
                 held_out: Optional[int] = None, out_path: Optional[str] = None) -> RunReport:
        report = evaluate_checkpoint(checkpoint, dataset, protocol, held_out,
                                     self.experiment.evaluation)
        payload = json.dumps(report.to_dict(), indent=2, sort_keys=True)
        if out_path:
            path = Path(out_path)
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(payload + "\n")
            logger.info(f"Report saved to {path}")
        else:
            print(payload)
        return report

    def sweep(self, methods: Optional[List[str]] = None, seeds: Optional[List[int]] = None,
              out_dir: Optional[str] = None, report: bool = True) -> List[Path]:
        """Run the method x seed grid and, unless disabled, aggregate it"""
        out = Path(out_dir) if out_dir else self.output_dir
        run_dirs = run_sweep(self.experiment, methods, seeds, out)
        if report:
            self.report(run_dirs, out / 'report')
        return run_dirs

    def report(self, run_dirs: List[Path], out_dir: Optional[str] = None) -> Dict[str, Path]:
        paths = build_report(run_dirs, out_dir or self.output_dir / 'report', plots=self.experiment.plots)
        print(f"\n{'=' * 60}")
        print("REPORT SAVED")
        print(f"{'=' * 60}")
        for name, path in paths.items():
            print(f"  - {name}: {path}")
        print(f"{'=' * 60}\n")
        return paths


def _load_spec_file(path: Path) -> Dict[str, Any]:
    with open(path, 'r', encoding='utf-8') as f:
        try:
            data = yaml.safe_load(f) if path.suffix in ('.yaml', '.yml') else json.load(f)
        except (yaml.YAMLError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot parse spec file {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"spec file {path} must hold a mapping")
    return data.get('dataset', data)


def build_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """Translate command-line flags into config-section overrides (None = keep config value)"""
    get = lambda name: getattr(args, name, None)  # noqa: E731
    dataset: Dict[str, Any] = {}
    spec = get('spec')
    if spec:
        spec_path = Path(spec)
        if spec_path.is_dir():
            dataset['path'] = str(spec_path)
        elif spec_path.exists():
            dataset.update(_load_spec_file(spec_path))
        else:
            raise ConfigError(f"--spec {spec} is neither a dataset directory nor a spec file")
    dataset.update({
        'num_classes': get('classes'), 'num_domains': get('domains'), 'imbalance_ratio': get('rho'),
        'head_count': get('head_count'), 'image_side': get('side'), 'channels': get('channels'),
        'noise_std': get('noise'), 'correlation_mode': get('correlation'),
        'domain_mode': get('domain_mode'), 'seed': get('data_seed'),
    })

    seeds = get('seeds')
    methods = get('methods')
    protocol = get('protocol')
    return {
        'dataset': dataset,
        'network': {'conv_blocks_before_r': get('layer_r')},
        'training': {
            'sampler': get('sampler'), 'warm_start_epochs': get('warm_start'),
            'alpha_c': get('alpha_c'), 'alpha_d': get('alpha_d'), 'gamma': get('gamma'),
            'detach_nuisance': True if get('detach_nuisance') else None,
            'mix_original': get('mix_original'), 'epochs': get('epochs'),
            'steps_per_epoch': get('steps'), 'batch_size': get('batch_size'),
            'learning_rate': get('lr'), 'loss': get('loss'),
        },
        'experiment': {
            'method': get('method'),
            'methods': methods.split(',') if methods else None,
            'protocol': protocol,
            'seeds': parse_seeds(seeds) if seeds else None,
        },
        'output': {'results_dir': get('out'), 'n_jobs': get('n_jobs'),
                   'plots': False if get('no_plots') else None,
                   'progress': False if get('quiet') else None},
    }


def _add_dataset_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--spec', type=str, help='Dataset directory or dataset spec file (JSON/YAML)')
    parser.add_argument('--classes', type=int, help='Number of classes')
    parser.add_argument('--domains', type=int, help='Number of domains')
    parser.add_argument('--rho', type=float, help='Imbalance ratio (largest / smallest class)')
    parser.add_argument('--head-count', type=int, help='Examples in each domain\'s largest class')
    parser.add_argument('--side', type=int, help='Image side in pixels')
    parser.add_argument('--channels', type=int, help='Image channels')
    parser.add_argument('--noise', type=float, help='Pixel noise standard deviation')
    parser.add_argument('--correlation', choices=['cyclic_shift', 'independent'])
    parser.add_argument('--domain-mode', choices=['affine', 'warp'])
    parser.add_argument('--data-seed', type=int, help='Dataset generation seed')


def _add_training_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--method', choices=sorted(METHODS))
    parser.add_argument('--sampler', choices=SAMPLER_STRATEGIES)
    parser.add_argument('--protocol', choices=['subpop', 'domainshift'])
    parser.add_argument('--seeds', type=str, help="Seed list, e.g. '0..4' or '0,3'")
    parser.add_argument('--warm-start', type=int, help='Warm-start epochs of plain ERM')
    parser.add_argument('--alpha-c', type=float, help='Beta concentration for class prototypes')
    parser.add_argument('--alpha-d', type=float, help='Beta concentration for domain statistics')
    parser.add_argument('--gamma', type=float, help='Prototype momentum')
    parser.add_argument('--layer-r', type=int, help='Conv blocks before the augmented layer')
    parser.add_argument('--detach-nuisance', action='store_true',
                        help='Stop gradients through the partner statistics')
    parser.add_argument('--mix-original', type=float, help='Probability of keeping an original representation')
    parser.add_argument('--epochs', type=int)
    parser.add_argument('--steps', type=int, help='Steps per epoch')
    parser.add_argument('--batch-size', type=int)
    parser.add_argument('--lr', type=float, help='Learning rate')
    parser.add_argument('--loss', choices=['cross_entropy', 'focal'])
    parser.add_argument('--n-jobs', type=int, help='Parallel workers')
    parser.add_argument('--quiet', action='store_true', help='No progress bars')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='tally-lt',
                                     description='Balanced augmentation for multi-domain long-tailed classification')
    parser.add_argument('--config', type=str, default='config/config.yaml',
                        help='Path to configuration file')
    sub = parser.add_subparsers(dest='command', required=True)

    generate = sub.add_parser('generate', help='Generate a synthetic dataset container')
    _add_dataset_flags(generate)
    generate.add_argument('--out', type=str, required=True, help='Dataset directory to write')

    train = sub.add_parser('train', help='Train and evaluate one method for each seed')
    _add_dataset_flags(train)
    _add_training_flags(train)
    train.add_argument('--out', type=str, help='Output directory for run directories')

    evaluate = sub.add_parser('eval', help='Evaluate a checkpoint on a dataset')
    evaluate.add_argument('--checkpoint', type=str, required=True)
    evaluate.add_argument('--dataset', type=str, required=True, help='Dataset directory')
    evaluate.add_argument('--protocol', choices=['subpop', 'domainshift'], default='subpop')
    evaluate.add_argument('--held-out', type=int, help='Held-out domain for domainshift')
    evaluate.add_argument('--out', type=str, help='Report JSON path (stdout when omitted)')

    sweep = sub.add_parser('sweep', help='Run a method x seed grid and report on it')
    _add_dataset_flags(sweep)
    _add_training_flags(sweep)
    sweep.add_argument('--methods', type=str, help="Comma-separated methods, e.g. 'erm,tally'")
    sweep.add_argument('--out', type=str, help='Output directory')
    sweep.add_argument('--no-plots', action='store_true')

    report = sub.add_parser('report', help='Aggregate run directories into CSV, JSON and SVG')
    report.add_argument('runs', nargs='+', help='Run directories (each holding report.json)')
    report.add_argument('--out', type=str, required=True, help='Report directory')
    report.add_argument('--no-plots', action='store_true')
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main execution function; returns the process exit code"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_CONFIG_ERROR

    try:
        if args.command == 'report':
            framework = TallyFramework(args.config, {'output': {'plots': False} if args.no_plots else {}})
            framework.report([Path(p) for p in args.runs], args.out)
        elif args.command == 'eval':
            framework = TallyFramework(args.config)
            framework.evaluate(args.checkpoint, args.dataset, args.protocol, args.held_out, args.out)
        else:
            framework = TallyFramework(args.config, build_overrides(args))
            if args.command == 'generate':
                framework.generate(args.out)
            elif args.command == 'train':
                framework.train(args.out)
            elif args.command == 'sweep':
                framework.sweep(out_dir=args.out)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG_ERROR
    except (TallyError, OSError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_RUNTIME_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
