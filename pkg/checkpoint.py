"""RDPCKPT1 checkpoint：8 字节 magic，4 字节小端 manifest 长度，JSON manifest，float64 小端数据。"""
import json
import logging
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from errors import CheckpointError, SnapshotMissingError
from model import expected_shapes, from_parameters

logger = logging.getLogger(__name__)

MAGIC = b'RDPCKPT1'
FORMAT_VERSION = 1
_LENGTH = struct.Struct('<I')
_FLOAT = np.dtype('<f8')


@dataclass
class Checkpoint:
    model: object
    epoch: int
    seed: int
    config: dict = field(default_factory=dict)


def _manifest(checkpoint):
    entries = []
    offset = 0
    for name, value in checkpoint.model.parameters().items():
        entries.append({'name': name, 'shape': list(value.shape), 'offset': offset})
        offset += value.size * _FLOAT.itemsize
    return {
        'format_version': FORMAT_VERSION,
        'depth': checkpoint.model.depth,
        'hidden': checkpoint.model.hidden,
        'seed': checkpoint.seed,
        'epoch': checkpoint.epoch,
        'config': checkpoint.config,
        'params': entries,
    }


def to_bytes(checkpoint):
    manifest = json.dumps(_manifest(checkpoint), sort_keys=True, separators=(',', ':')).encode('utf-8')
    payload = b''.join(np.ascontiguousarray(value, dtype=_FLOAT).tobytes()
                       for value in checkpoint.model.parameters().values())
    return MAGIC + _LENGTH.pack(len(manifest)) + manifest + payload


def _is_int(value):
    # JSON 的 true/false 在 Python 里也是 int
    return isinstance(value, int) and not isinstance(value, bool)


def from_bytes(blob):
    if len(blob) < len(MAGIC) + _LENGTH.size or blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError('magic', f'expected {MAGIC.decode()} header')
    start = len(MAGIC) + _LENGTH.size
    (length,) = _LENGTH.unpack(blob[len(MAGIC):start])
    if start + length > len(blob):
        raise CheckpointError('manifest_length', f'{length} bytes declared, file too short')
    try:
        manifest = json.loads(blob[start:start + length].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError('manifest', f'not valid JSON ({e})') from e
    if not isinstance(manifest, dict):
        raise CheckpointError('manifest', 'not a JSON object')

    for key in ('format_version', 'depth', 'hidden', 'seed', 'epoch', 'config', 'params'):
        if key not in manifest:
            raise CheckpointError(key, 'missing')
    if manifest['format_version'] != FORMAT_VERSION:
        raise CheckpointError('format_version', f'unsupported version {manifest["format_version"]}')

    if not isinstance(manifest['config'], dict):
        raise CheckpointError('config', 'must be a JSON object')

    payload = blob[start + length:]
    for key in ('depth', 'hidden'):
        if not _is_int(manifest[key]) or manifest[key] < 1:
            raise CheckpointError(key, 'must be a positive integer')
    for key in ('epoch', 'seed'):
        if not _is_int(manifest[key]) or manifest[key] < 0:
            raise CheckpointError(key, 'must be a non-negative integer')
    shapes = expected_shapes(manifest['depth'], manifest['hidden'])
    entries = manifest['params']
    names = [entry.get('name') if isinstance(entry, dict) else None for entry in entries] \
        if isinstance(entries, list) else None
    if names != list(shapes):
        raise CheckpointError('params', 'parameter names do not match depth/hidden')

    params = {}
    offset = 0
    for entry in entries:
        name = entry['name']
        shape = entry.get('shape')
        shape = tuple(shape) if isinstance(shape, list) else None
        if shape != shapes[name]:
            raise CheckpointError(f'params.{name}.shape', f'expected {list(shapes[name])}, got {entry.get("shape")}')
        if entry.get('offset') != offset:
            raise CheckpointError(f'params.{name}.offset', f'expected {offset}, got {entry.get("offset")}')
        nbytes = int(np.prod(shape)) * _FLOAT.itemsize
        if offset + nbytes > len(payload):
            raise CheckpointError(f'params.{name}.offset', 'payload truncated')
        params[name] = np.frombuffer(payload, dtype=_FLOAT, count=nbytes // _FLOAT.itemsize,
                                     offset=offset).reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError('params', f'{len(payload) - offset} trailing payload bytes')

    return Checkpoint(from_parameters(params), manifest['epoch'], manifest['seed'], manifest['config'])


def save(checkpoint, file_path):
    with open(file_path, 'wb') as file:
        file.write(to_bytes(checkpoint))
    logger.debug('checkpoint 已保存: %s', file_path)


def load(file_path):
    with open(file_path, 'rb') as file:
        return from_bytes(file.read())


def epoch_path(run_dir, epoch):
    return os.path.join(run_dir, f'epoch_{epoch}.ckpt')


def load_snapshots(run_dir, epochs):
    snapshots = {}
    for epoch in epochs:
        file_path = epoch_path(run_dir, epoch)
        if not os.path.isfile(file_path):
            raise SnapshotMissingError(f'no checkpoint for epoch {epoch} in {run_dir}')
        snapshots[epoch] = load(file_path)
    return snapshots
