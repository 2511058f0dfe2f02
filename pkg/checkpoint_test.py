import json
import struct

import numpy as np
import pytest

from checkpoint import MAGIC, Checkpoint, epoch_path, from_bytes, load, load_snapshots, save, to_bytes
from dataset import generate_grid
from errors import CheckpointError, SnapshotMissingError
from model import extract_features, init_model


def _checkpoint(depth=2, hidden=3, seed=0, epoch=5):
    return Checkpoint(init_model(depth, hidden, seed), epoch, seed, {'algorithm': 'standard', 'depth': depth})


def _split(blob):
    (length,) = struct.unpack('<I', blob[8:12])
    return json.loads(blob[12:12 + length]), blob[12 + length:]


def _join(manifest, payload):
    text = json.dumps(manifest, sort_keys=True, separators=(',', ':')).encode('utf-8')
    return MAGIC + struct.pack('<I', len(text)) + text + payload


def test_layout():
    checkpoint = _checkpoint()
    blob = to_bytes(checkpoint)
    assert blob[:8] == b'RDPCKPT1'
    manifest, payload = _split(blob)
    assert manifest['depth'] == 2 and manifest['hidden'] == 3
    assert manifest['epoch'] == 5 and manifest['seed'] == 0
    assert manifest['config'] == {'algorithm': 'standard', 'depth': 2}
    assert [entry['name'] for entry in manifest['params']][:3] == ['pre.weight', 'pre.bias', 'blocks.0.weight']
    assert len(payload) == checkpoint.model.parameter_count * 8
    offsets = [entry['offset'] for entry in manifest['params']]
    sizes = [int(np.prod(entry['shape'])) * 8 for entry in manifest['params']]
    assert offsets == list(np.cumsum([0] + sizes[:-1]))
    first = np.frombuffer(payload[:8], dtype='<f8')[0]
    assert first == checkpoint.model.pre.weight[0, 0]


def test_round_trip_is_bit_exact(tmp_path):
    checkpoint = _checkpoint(depth=3, hidden=4, seed=9)
    first = tmp_path / 'a.ckpt'
    second = tmp_path / 'b.ckpt'
    save(checkpoint, first)
    loaded = load(first)
    save(loaded, second)
    assert first.read_bytes() == second.read_bytes()
    for name, value in checkpoint.model.parameters().items():
        assert np.array_equal(loaded.model.parameters()[name], value)
    assert (loaded.epoch, loaded.seed, loaded.config) == (5, 9, checkpoint.config)


def test_reloaded_features_are_identical(tmp_path):
    checkpoint = _checkpoint(depth=2, hidden=4, seed=1)
    save(checkpoint, tmp_path / 'model.ckpt')
    grid = generate_grid(10)
    original = extract_features(checkpoint.model, grid)
    reloaded = extract_features(load(tmp_path / 'model.ckpt').model, grid)
    assert all(np.array_equal(a, b) for a, b in zip(original.layers, reloaded.layers))


def test_loaded_parameters_are_writable():
    loaded = from_bytes(to_bytes(_checkpoint()))
    loaded.model.pre.weight[0, 0] += 1.0


def _field(blob):
    with pytest.raises(CheckpointError) as info:
        from_bytes(blob)
    return info.value.field


def test_corrupt_header():
    blob = to_bytes(_checkpoint())
    assert _field(b'NOTACKPT' + blob[8:]) == 'magic'
    assert _field(blob[:6]) == 'magic'
    assert _field(blob[:8] + struct.pack('<I', 10 ** 6) + blob[12:]) == 'manifest_length'
    assert _field(MAGIC + struct.pack('<I', 3) + b'{x}') == 'manifest'


def test_corrupt_manifest_fields():
    manifest, payload = _split(to_bytes(_checkpoint()))

    missing = dict(manifest)
    del missing['hidden']
    assert _field(_join(missing, payload)) == 'hidden'

    version = dict(manifest, format_version=2)
    assert _field(_join(version, payload)) == 'format_version'

    depth = dict(manifest, depth=0)
    assert _field(_join(depth, payload)) == 'depth'

    config = dict(manifest, config=[1, 2])
    assert _field(_join(config, payload)) == 'config'

    assert _field(_join(dict(manifest, epoch='x'), payload)) == 'epoch'
    assert _field(_join(dict(manifest, epoch=-1), payload)) == 'epoch'
    assert _field(_join(dict(manifest, seed=1.5), payload)) == 'seed'
    assert _field(_join(dict(manifest, hidden=True), payload)) == 'hidden'

    renamed = json.loads(json.dumps(manifest))
    renamed['params'][0]['name'] = 'stem.weight'
    assert _field(_join(renamed, payload)) == 'params'

    shape = json.loads(json.dumps(manifest))
    shape['params'][0]['shape'] = [2, 3]
    assert _field(_join(shape, payload)) == 'params.pre.weight.shape'

    offset = json.loads(json.dumps(manifest))
    offset['params'][1]['offset'] += 8
    assert _field(_join(offset, payload)) == 'params.pre.bias.offset'


def test_payload_length_is_checked():
    manifest, payload = _split(to_bytes(_checkpoint()))
    assert _field(_join(manifest, payload[:-8])) == 'params.post.bias.offset'
    assert _field(_join(manifest, payload + b'\0' * 8)) == 'params'


def test_checkpoint_error_message_names_field():
    with pytest.raises(CheckpointError, match="checkpoint field 'magic'"):
        from_bytes(b'garbage-bytes')


def test_load_snapshots(tmp_path):
    for epoch in (0, 3):
        save(_checkpoint(epoch=epoch), epoch_path(tmp_path, epoch))
    snapshots = load_snapshots(tmp_path, [0, 3])
    assert sorted(snapshots) == [0, 3]
    assert snapshots[3].epoch == 3
    with pytest.raises(SnapshotMissingError, match='epoch 7'):
        load_snapshots(tmp_path, [0, 7])
