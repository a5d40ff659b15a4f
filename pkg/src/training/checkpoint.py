"""
Checkpoint Module
Directory checkpoints of a TrainState.

    manifest.json    format version, configs, seed, step, RNG state, blob layouts, digests, history
    parameters.bin   network parameters in NetworkConfig.parameter_shapes() order
    momentum.bin     optimizer velocities, same order
    bank.bin         prototype bank arrays in PrototypeBank.state_arrays() order (TALLY runs only)

Every blob is a flat little-endian float64 array, each tensor row-major.
"""

import hashlib
import json
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

from src.augmentation.prototype_bank import PrototypeBank
from src.models.network import Network, NetworkConfig
from src.training.optimizer import SGD
from src.training.trainer import TrainConfig, TrainState
from src.utils.errors import ConfigError, FormatError
from src.utils.logger import get_logger

logger = get_logger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
BLOB_DTYPE = '<f8'


def _write_blob(path: Path, flat: np.ndarray) -> str:
    blob = np.ascontiguousarray(flat, dtype=BLOB_DTYPE).tobytes()
    path.write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def _read_blob(path: Path, digest: str, expected_size: int) -> np.ndarray:
    if not path.exists():
        raise FormatError(f"checkpoint blob {path.name} is missing")
    blob = path.read_bytes()
    if hashlib.sha256(blob).hexdigest() != digest:
        raise FormatError(f"checkpoint blob {path.name} is corrupt (digest mismatch)")
    flat = np.frombuffer(blob, dtype=BLOB_DTYPE).astype(np.float64)
    if flat.size != expected_size:
        raise FormatError(f"{path.name} holds {flat.size} values, expected {expected_size}")
    return flat


def save_checkpoint(state: TrainState, path: Union[str, Path],
                    metadata: Optional[Dict[str, Any]] = None) -> Path:
    """Write the state; two identical runs produce byte-identical checkpoints

    `metadata` is stored verbatim (method, held-out domain, ...) for later evaluation.
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)

    manifest: Dict[str, Any] = {
        'format_version': CHECKPOINT_FORMAT_VERSION,
        'byte_order': 'little',
        'dtype': 'float64',
        'kind': state.kind,
        'seed': state.seed,
        'step': state.step,
        'epoch': state.epoch,
        'network_config': state.network.config.to_dict(),
        'train_config': state.config.to_dict(),
        'parameter_layout': [[name, list(shape)] for name, shape
                             in state.network.config.parameter_shapes()],
        'rng_state': state.rng.bit_generator.state,
        'history': state.history,
        'epoch_losses': state.epoch_losses,
        'digests': {},
        'metadata': metadata or {},
    }
    manifest['digests']['parameters'] = _write_blob(root / 'parameters.bin',
                                                    state.network.get_flat_parameters())
    manifest['digests']['momentum'] = _write_blob(root / 'momentum.bin', state.optimizer.velocity_flat())

    if state.bank is not None:
        arrays = state.bank.state_arrays()
        manifest['bank'] = state.bank.metadata()
        manifest['bank_layout'] = [[name, list(arr.shape)] for name, arr in arrays.items()]
        manifest['digests']['bank'] = _write_blob(
            root / 'bank.bin', np.concatenate([arr.ravel() for arr in arrays.values()]))

    with open(root / 'manifest.json', 'w') as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write('\n')
    logger.debug(f"Checkpoint at step {state.step} written to {root}")
    return root


def read_checkpoint_manifest(path: Union[str, Path]) -> Dict[str, Any]:
    manifest_path = Path(path) / 'manifest.json'
    if not manifest_path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest_path}")
    try:
        with open(manifest_path, 'r') as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"unreadable checkpoint manifest: {e}") from e

    version = manifest.get('format_version')
    if version != CHECKPOINT_FORMAT_VERSION:
        raise FormatError(f"checkpoint format version {version} is not supported "
                          f"(expected {CHECKPOINT_FORMAT_VERSION})")
    return manifest


def load_checkpoint(path: Union[str, Path],
                    expected_network: Optional[NetworkConfig] = None) -> TrainState:
    """Restore a TrainState; refuses other format versions, corrupt blobs and mismatched networks"""
    root = Path(path)
    manifest = read_checkpoint_manifest(root)

    network_config = NetworkConfig.from_dict(manifest['network_config'])
    if expected_network is not None and expected_network != network_config:
        raise ConfigError(f"checkpoint network {network_config.to_dict()} does not match "
                          f"the requested network {expected_network.to_dict()}")

    config = TrainConfig.from_dict(manifest['train_config'])
    count = network_config.parameter_count()
    digests = manifest['digests']

    network = Network.init_parameters(network_config, seed=0)
    network.set_flat_parameters(_read_blob(root / 'parameters.bin', digests['parameters'], count))
    optimizer = SGD(network.parameters, config.learning_rate, config.momentum, config.weight_decay)
    optimizer.load_velocity_flat(_read_blob(root / 'momentum.bin', digests['momentum'], count))

    rng = np.random.default_rng()
    rng.bit_generator.state = manifest['rng_state']

    bank = None
    if 'bank' in manifest:
        layout = [(name, tuple(shape)) for name, shape in manifest['bank_layout']]
        total = int(sum(np.prod(shape) for _, shape in layout))
        flat = _read_blob(root / 'bank.bin', digests['bank'], total)
        arrays, offset = {}, 0
        for name, shape in layout:
            size = int(np.prod(shape))
            arrays[name] = flat[offset:offset + size].reshape(shape)
            offset += size
        bank = PrototypeBank.from_state(manifest['bank'], arrays)

    return TrainState(kind=manifest['kind'], seed=int(manifest['seed']), config=config,
                      network=network, optimizer=optimizer, rng=rng, bank=bank,
                      step=int(manifest['step']), history=manifest['history'],
                      epoch_losses=[float(v) for v in manifest['epoch_losses']])
