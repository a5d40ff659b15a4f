"""
Configuration Module
Handles configuration loading and management
"""

import copy
import json
import os
import re
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import yaml
from dotenv import load_dotenv

from src.utils.errors import ConfigError
from src.utils.logger import get_logger

logger = get_logger(__name__)

REQUIRED_SECTIONS = ('dataset', 'network', 'training', 'experiment', 'evaluation', 'output', 'logging')


class Config:
    """Configuration manager for the framework"""

    def __init__(self, config_path: Optional[Union[str, Path]] = "config/config.yaml",
                 overrides: Optional[Dict[str, Any]] = None):
        """Initialize configuration from file and environment"""
        load_dotenv()  # Load environment variables from .env file

        self.config_path = Path(config_path) if config_path else None
        self.config = self._load_config()
        self._resolve_env_variables(self.config)
        self._apply_env_overrides()
        if overrides:
            self.merge(overrides)
        self._validate_config()

    def _resolve_env_variables(self, obj: Any) -> Any:
        """Recursively resolve ${VAR} patterns in config values"""
        if isinstance(obj, dict):
            for key, value in obj.items():
                obj[key] = self._resolve_env_variables(value)
        elif isinstance(obj, list):
            for i, item in enumerate(obj):
                obj[i] = self._resolve_env_variables(item)
        elif isinstance(obj, str):
            pattern = r'\$\{([^}]+)\}'
            matches = re.findall(pattern, obj)
            for match in matches:
                env_value = os.getenv(match, '')
                obj = obj.replace(f'${{{match}}}', env_value)
        return obj

    def _load_config(self) -> Dict[str, Any]:
        """Load configuration from file, layered over the defaults"""
        config = self._get_default_config()
        if self.config_path is None:
            return config
        if not self.config_path.exists():
            logger.warning(f"Config file {self.config_path} not found, using defaults")
            return config

        try:
            with open(self.config_path, 'r', encoding='utf-8') as f:
                if self.config_path.suffix in ('.yaml', '.yml'):
                    loaded = yaml.safe_load(f) or {}
                elif self.config_path.suffix == '.json':
                    loaded = json.load(f)
                else:
                    raise ConfigError(f"Unsupported config format: {self.config_path.suffix}")
        except (yaml.YAMLError, json.JSONDecodeError) as e:
            raise ConfigError(f"Cannot parse {self.config_path}: {e}") from e

        if not isinstance(loaded, dict):
            raise ConfigError(f"{self.config_path} must contain a mapping at top level")
        _deep_update(config, loaded)
        return config

    def _get_default_config(self) -> Dict[str, Any]:
        """Get default configuration"""
        return {
            'dataset': {
                'path': None,
                'num_classes': 10,
                'num_domains': 4,
                'image_side': 16,
                'channels': 3,
                'imbalance_ratio': 50.0,
                'head_count': 500,
                'correlation_mode': 'cyclic_shift',
                'domain_mode': 'affine',
                'noise_std': 0.1,
                'val_per_cell': 10,
                'test_per_cell': 20,
                'seed': 0
            },
            'network': {
                'hidden_channels': 8,
                'conv_blocks_before_r': 1,
                'conv_blocks_after_r': 1
            },
            'training': {
                'learning_rate': 0.01,
                'momentum': 0.9,
                'weight_decay': 1e-6,
                'batch_size': 32,
                'epochs': 15,
                'steps_per_epoch': 50,
                'warm_start_epochs': 7,
                'gamma': 0.8,
                'alpha_c': 0.5,
                'alpha_d': 0.5,
                'loss': 'cross_entropy',
                'focal_gamma': 2.0,
                'sampler': 'selective',
                'detach_nuisance': False,
                'mix_original': 0.0,
                'prototype_recompute': 'streaming',
                'eps': 1e-5
            },
            'experiment': {
                'method': 'tally',
                'methods': ['erm', 'tally'],
                'protocol': 'subpopulation',
                'seeds': [0]
            },
            'evaluation': {
                'invariance': True,
                'kl_min_samples': 5,
                'logreg_l2': 1e-3,
                'logreg_tol': 1e-6,
                'logreg_max_iter': 10000,
                'holdout_fraction': 0.2
            },
            'numerics': {
                'check_finite': False
            },
            'output': {
                'results_dir': 'results',
                'progress': True,
                'n_jobs': 1,
                'plots': True
            },
            'logging': {
                'level': 'INFO',
                'file': None
            }
        }

    def _apply_env_overrides(self) -> None:
        """Apply environment variable overrides"""
        env_mappings = {
            'TALLY_LOG_LEVEL': (['logging', 'level'], str),
            'TALLY_OUTPUT_DIR': (['output', 'results_dir'], str),
            'TALLY_CHECK_FINITE': (['numerics', 'check_finite'], _parse_bool),
            'TALLY_N_JOBS': (['output', 'n_jobs'], int),
        }

        for env_var, (config_path, cast) in env_mappings.items():
            value = os.getenv(env_var)
            if value:
                try:
                    self._set_nested(self.config, config_path, cast(value))
                except ValueError as e:
                    raise ConfigError(f"Invalid value for {env_var}: {value!r}") from e

    def _set_nested(self, dictionary: Dict, path: List[str], value: Any) -> None:
        """Set a value in a nested dictionary using a path"""
        for key in path[:-1]:
            dictionary = dictionary.setdefault(key, {})
        dictionary[path[-1]] = value

    def _validate_config(self) -> None:
        """Validate configuration"""
        for section in REQUIRED_SECTIONS:
            if not isinstance(self.config.get(section), dict):
                raise ConfigError(f"Config section '{section}' is missing or not a mapping")

        level = str(self.config['logging'].get('level', 'INFO')).upper()
        if level not in ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'):
            raise ConfigError(f"Unknown logging level: {level}")

        seeds = self.config['experiment'].get('seeds')
        if not seeds:
            raise ConfigError("experiment.seeds must be a non-empty list")

    def merge(self, overrides: Dict[str, Any]) -> None:
        """Deep-merge overrides into the configuration, skipping None values"""
        _deep_update(self.config, _drop_none(overrides))

    def get(self, key: str, default: Any = None) -> Any:
        """Get configuration value"""
        return self.config.get(key, default)

    def section(self, name: str) -> Dict[str, Any]:
        """Get a copy of a configuration section"""
        return copy.deepcopy(self.config.get(name, {}))

    def save_config(self, path: Optional[Union[str, Path]] = None) -> None:
        """Save current configuration to file"""
        save_path = Path(path) if path else self.config_path

        if save_path.suffix in ['.yaml', '.yml']:
            with open(save_path, 'w', encoding='utf-8') as f:
                yaml.dump(self.config, f, default_flow_style=False)
        else:
            with open(save_path, 'w', encoding='utf-8') as f:
                json.dump(self.config, f, indent=2, sort_keys=True)


def _deep_update(base: Dict[str, Any], updates: Dict[str, Any]) -> Dict[str, Any]:
    for key, value in updates.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = copy.deepcopy(value)
    return base


def _drop_none(obj: Dict[str, Any]) -> Dict[str, Any]:
    cleaned = {}
    for key, value in obj.items():
        if isinstance(value, dict):
            nested = _drop_none(value)
            if nested:
                cleaned[key] = nested
        elif value is not None:
            cleaned[key] = value
    return cleaned


def _parse_bool(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ('1', 'true', 'yes', 'on'):
        return True
    if lowered in ('0', 'false', 'no', 'off'):
        return False
    raise ValueError(value)


def canonical_json(obj: Any) -> str:
    """Deterministic JSON used for config hashing"""
    return json.dumps(obj, sort_keys=True, separators=(',', ':'))
