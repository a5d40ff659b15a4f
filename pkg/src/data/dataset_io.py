"""
Dataset IO Module
Directory container: manifest.json plus one binary record file per split.

Record layout (little-endian, no padding):
    [y: u32][d: u32][pixels: f32 x channels*H*W]
"""

import hashlib
import json
from pathlib import Path
from typing import Any, Dict, Union

import numpy as np

from src.data.synthetic_generator import Dataset, DatasetSpec, DatasetSplits
from src.utils.errors import FormatError
from src.utils.logger import get_logger

logger = get_logger(__name__)

DATASET_FORMAT_VERSION = 1
MANIFEST_NAME = 'manifest.json'


def record_dtype(pixels: int) -> np.dtype:
    return np.dtype([('y', '<u4'), ('d', '<u4'), ('x', '<f4', (pixels,))])


def storage_precision(dataset: Dataset) -> Dataset:
    """Round pixels through float32, the precision kept on disk"""
    x = dataset.x.astype('<f4').astype(np.float64)
    return Dataset(x, dataset.y, dataset.d, dataset.num_classes, dataset.num_domains,
                   dataset.domain_ids)


def splits_at_storage_precision(splits: DatasetSplits) -> DatasetSplits:
    return DatasetSplits(spec=splits.spec, train=storage_precision(splits.train),
                         val=storage_precision(splits.val), test=storage_precision(splits.test))


def encode_records(dataset: Dataset) -> bytes:
    pixels = int(np.prod(dataset.x.shape[1:])) if dataset.x.ndim > 1 else 0
    records = np.zeros(len(dataset), dtype=record_dtype(pixels))
    records['y'] = dataset.y
    records['d'] = dataset.d
    records['x'] = dataset.x.reshape(len(dataset), pixels)
    return records.tobytes()


def decode_records(blob: bytes, spec: DatasetSpec, num_domains: int, domain_ids) -> Dataset:
    dtype = record_dtype(spec.pixels)
    if len(blob) % dtype.itemsize:
        raise FormatError(f"record blob of {len(blob)} bytes is not a multiple of {dtype.itemsize}")
    records = np.frombuffer(blob, dtype=dtype)
    x = records['x'].astype(np.float64).reshape(-1, spec.channels, spec.image_side, spec.image_side)
    return Dataset(x, records['y'].astype(np.int64), records['d'].astype(np.int64),
                   spec.num_classes, num_domains, tuple(domain_ids))


def _json_ready(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return [_json_ready(v) for v in value.tolist()]
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return value


def build_manifest(splits: DatasetSplits, digests: Dict[str, str]) -> Dict[str, Any]:
    manifest = {
        'format_version': DATASET_FORMAT_VERSION,
        'spec': splits.spec.to_dict(),
        'record_layout': {'y': '<u4', 'd': '<u4', 'pixels': '<f4',
                          'pixels_per_record': splits.spec.pixels},
        'splits': {},
    }
    for name, dataset in splits.items():
        manifest['splits'][name] = {
            'file': f"{name}.bin",
            'size': len(dataset),
            'num_domains': dataset.num_domains,
            'domain_ids': list(dataset.domain_ids),
            'counts': dataset.counts().tolist(),
            'sha256': digests[name],
        }
    manifest['measured_imbalance'] = _json_ready(
        [float(v) for v in splits.train.measured_imbalance()])
    return manifest


def save_dataset(splits: DatasetSplits, out_dir: Union[str, Path]) -> Path:
    """Write the container; identical splits always produce identical bytes"""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digests = {}
    for name, dataset in splits.items():
        blob = encode_records(dataset)
        (out / f"{name}.bin").write_bytes(blob)
        digests[name] = hashlib.sha256(blob).hexdigest()

    manifest = build_manifest(splits, digests)
    with open(out / MANIFEST_NAME, 'w') as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write('\n')
    logger.info(f"Dataset written to {out} ({sum(len(d) for _, d in splits.items())} records)")
    return out


def read_manifest(path: Union[str, Path]) -> Dict[str, Any]:
    manifest_path = Path(path) / MANIFEST_NAME
    try:
        with open(manifest_path, 'r') as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"unreadable dataset manifest {manifest_path}: {e}") from e
    version = manifest.get('format_version')
    if version != DATASET_FORMAT_VERSION:
        raise FormatError(f"dataset format version {version} is not supported "
                          f"(expected {DATASET_FORMAT_VERSION})")
    return manifest


def load_dataset(path: Union[str, Path]) -> DatasetSplits:
    """Read a container written by save_dataset, verifying sizes and digests"""
    root = Path(path)
    manifest = read_manifest(root)
    spec = DatasetSpec.from_dict(manifest['spec'])

    loaded = {}
    for name in ('train', 'val', 'test'):
        entry = manifest['splits'][name]
        blob = (root / entry['file']).read_bytes()
        if hashlib.sha256(blob).hexdigest() != entry['sha256']:
            raise FormatError(f"{entry['file']} does not match its manifest digest")
        dataset = decode_records(blob, spec, entry['num_domains'], entry['domain_ids'])
        if len(dataset) != entry['size']:
            raise FormatError(f"{entry['file']} holds {len(dataset)} records, manifest says {entry['size']}")
        loaded[name] = dataset

    logger.debug(f"Loaded dataset from {root}: " +
                 ", ".join(f"{k}={len(v)}" for k, v in loaded.items()))
    return DatasetSplits(spec=spec, **loaded)
