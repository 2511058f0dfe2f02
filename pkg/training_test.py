import numpy as np
import pytest

from dataset import PointSet, SpiralParams, batch_iterator, generate_spiral
from errors import DivergenceError, StateError, ValidationError
from model import DropMask, from_parameters, init_model
from training import (AdamState, Algorithm, MaskReuse, Mode, TrainConfig, Trainer, TrainerState, adam_step,
                      compute_gradients, evaluate, fit_masks, frozen_blocks, mask_rng, sample_mask, train,
                      train_iteration)


def _config(**changes):
    values = dict(depth=2, hidden=3, epochs=2, batch_size=16, seed=0)
    values.update(changes)
    return TrainConfig(**values)


def _setup(config):
    model = init_model(config.depth, config.hidden, config.seed)
    return model, TrainerState(rng=mask_rng(config.seed)), AdamState.zeros_like(model.parameters())


def _batch(seed, size=16):
    rng = np.random.default_rng(seed)
    return rng.uniform(-1, 1, (size, 2)), rng.integers(0, 2, size)


def _snapshot(model):
    return {name: value.copy() for name, value in model.parameters().items()}


def test_config_defaults():
    config = TrainConfig()
    assert config.algorithm is Algorithm.RESIDUAL_DROPPATH
    assert (config.depth, config.hidden, config.lr, config.betas) == (6, 6, 0.1, (0.9, 0.999))
    assert (config.epochs, config.batch_size, config.drop_rate, config.eps) == (1000, 256, 0.1, 1e-8)
    assert config.mask_reuse is MaskReuse.LITERAL


@pytest.mark.parametrize('changes', [
    {'algorithm': 'dropout'}, {'mask_reuse': 'sometimes'}, {'drop_rate': 1.0}, {'drop_rate': -0.1},
    {'lr': 0.0}, {'betas': (0.9, 1.0)}, {'batch_size': 0},
])
def test_config_rejects_invalid_values(changes):
    with pytest.raises(ValidationError):
        TrainConfig(**changes)


def test_sample_mask_examples():
    rng = np.random.default_rng(0)
    assert np.all(sample_mask(32, 0.0, rng).values == 1.0)

    keep_rate = sample_mask(100000, 0.1, np.random.default_rng(1)).values.mean()
    assert abs(keep_rate - 0.9) < 0.00285

    a = sample_mask(50, 0.5, np.random.default_rng(2))
    b = sample_mask(50, 0.5, np.random.default_rng(2))
    assert np.array_equal(a.values, b.values)


def test_adam_first_step():
    params = {'w': np.zeros(1)}
    state = AdamState.zeros_like(params)
    adam_step(params, {'w': np.ones(1)}, state, lr=0.1, betas=(0.9, 0.999), eps=1e-8)
    assert state.t == 1
    assert params['w'][0] == pytest.approx(-0.1 / (1.0 + 1e-8), abs=1e-15)
    assert params['w'][0] == pytest.approx(-0.09999999, abs=1e-8)


def test_adam_first_step_is_sign_like():
    for g in (0.01, 1.0, 100.0, -3.0):
        params = {'w': np.zeros(1)}
        adam_step(params, {'w': np.array([g])}, AdamState.zeros_like(params), 0.1, (0.9, 0.999), 1e-8)
        assert abs(params['w'][0]) == pytest.approx(0.1, rel=1e-5)
        assert np.sign(params['w'][0]) == -np.sign(g)


def test_adam_zero_gradient_is_fixed_point():
    params = {'w': np.array([1.5, -2.0])}
    state = AdamState.zeros_like(params)
    for _ in range(3):
        adam_step(params, {'w': np.zeros(2)}, state, 0.1, (0.9, 0.999), 1e-8)
    assert np.array_equal(params['w'], [1.5, -2.0])
    assert np.all(state.v['w'] >= 0.0)


def test_adam_skips_frozen_parameters():
    params = {'a': np.ones(2), 'b': np.ones(2)}
    state = AdamState.zeros_like(params)
    adam_step(params, {'a': np.ones(2), 'b': np.ones(2)}, state, 0.1, (0.9, 0.999), 1e-8, skip={'b'})
    assert np.array_equal(params['b'], np.ones(2))
    assert not state.m['b'].any()
    assert np.all(params['a'] < 1.0)


def test_adam_names_nan_parameter():
    params = {'good': np.zeros(1), 'blocks.0.weight': np.zeros(1)}
    with pytest.raises(DivergenceError, match='blocks.0.weight') as info:
        adam_step(params, {'good': np.ones(1), 'blocks.0.weight': np.array([np.nan])},
                  AdamState.zeros_like(params), 0.1, (0.9, 0.999), 1e-8)
    assert info.value.parameter == 'blocks.0.weight'
    assert params['good'][0] == 0.0


def test_fit_masks_truncates_and_cycles():
    masks = [DropMask([[1.0], [0.0], [1.0], [1.0]], 0)]
    assert fit_masks(masks, 2)[0].values.ravel().tolist() == [1.0, 0.0]
    assert fit_masks(masks, 6)[0].values.ravel().tolist() == [1.0, 0.0, 1.0, 1.0, 1.0, 0.0]
    assert fit_masks(masks, 4)[0] is masks[0]


def test_frozen_blocks():
    ones = [DropMask.ones(3, 0), DropMask([[1.0], [0.0], [1.0]], 1)]
    zeros = [DropMask.zeros(3, 0), DropMask.ones(3, 1)]
    assert frozen_blocks(Mode.STAGE2, ones) == {'blocks.0.weight', 'blocks.0.bias'}
    assert frozen_blocks(Mode.DROPPATH, zeros) == {'blocks.0.weight', 'blocks.0.bias'}
    assert frozen_blocks(Mode.STANDARD, ones) == frozenset()


def test_stage_counter_alternates():
    config = _config(algorithm='residual_droppath')
    model, state, adam = _setup(config)
    stages = []
    for step in range(5):
        stages.append(state.stage)
        X, Y = _batch(step)
        train_iteration(model, X, Y, config, state, adam)
        # 偶数阶段之后一定存着 mask，奇数阶段之后清空
        assert (state.stored_masks is not None) == (stages[-1] % 2 == 0)
    assert stages == [0, 1, 2, 3, 4]
    assert state.iteration == 5


def test_odd_stage_reuses_even_stage_masks():
    config = _config(algorithm='residual_droppath', drop_rate=0.5)
    model, state, adam = _setup(config)
    X, Y = _batch(1)
    train_iteration(model, X, Y, config, state, adam)
    stored = [mask.values.copy() for mask in state.stored_masks]

    X2, Y2 = _batch(2)
    expected = compute_gradients(model, X2, Y2, Mode.STAGE2, [DropMask(v, i) for i, v in enumerate(stored)])
    before = _snapshot(model)
    loss = train_iteration(model, X2, Y2, config, state, adam)
    assert loss == expected.loss
    for index in range(config.depth):
        name = f'blocks.{index}.weight'
        if name in expected.frozen:
            assert np.array_equal(model.parameters()[name], before[name])


def test_odd_stage_without_masks_is_a_state_error():
    config = _config(algorithm='residual_droppath')
    model, state, adam = _setup(config)
    state.stage = 1
    X, Y = _batch(0)
    with pytest.raises(StateError):
        train_iteration(model, X, Y, config, state, adam)


def test_odd_stage_loss_equals_standard_loss():
    config = _config(algorithm='residual_droppath', drop_rate=0.3)
    model, state, adam = _setup(config)
    X, Y = _batch(3)
    train_iteration(model, X, Y, config, state, adam)
    X2, Y2 = _batch(4)
    standard = compute_gradients(model, X2, Y2, Mode.STANDARD).loss
    assert train_iteration(model, X2, Y2, config, state, adam) == standard


def test_zero_drop_rate_residual_droppath():
    config = _config(algorithm='residual_droppath', drop_rate=0.0)
    model, state, adam = _setup(config)
    reference, _, reference_adam = _setup(_config(algorithm='standard'))
    X, Y = _batch(5)

    # 偶数阶段和标准迭代完全一致
    even = compute_gradients(model, X, Y, Mode.DROPPATH, [DropMask.ones(16, i) for i in range(2)])
    standard = compute_gradients(reference, X, Y, Mode.STANDARD)
    for name in standard.grads:
        assert np.array_equal(even.grads[name], standard.grads[name])
    train_iteration(model, X, Y, config, state, adam)
    train_iteration(reference, X, Y, _config(algorithm='standard'), TrainerState(rng=mask_rng(0)), reference_adam)
    for name, value in reference.parameters().items():
        assert np.array_equal(model.parameters()[name], value)

    # 奇数阶段：全部保留 => block 梯度为 0，只更新 pre/post
    before = _snapshot(model)
    X2, Y2 = _batch(6)
    result = compute_gradients(model, X2, Y2, Mode.STAGE2, [DropMask.ones(16, i) for i in range(2)])
    assert all(not result.grads[name].any() for name in result.grads if name.startswith('blocks.'))
    train_iteration(model, X2, Y2, config, state, adam)
    for name, value in model.parameters().items():
        if name.startswith('blocks.'):
            assert np.array_equal(value, before[name]), name
        else:
            assert not np.array_equal(value, before[name]), name


def test_literal_reuse_fits_partial_batch():
    config = _config(algorithm='residual_droppath', drop_rate=0.5)
    model, state, adam = _setup(config)
    X, Y = _batch(7, size=16)
    train_iteration(model, X, Y, config, state, adam)
    X2, Y2 = _batch(8, size=5)
    loss = train_iteration(model, X2, Y2, config, state, adam)
    assert np.isfinite(loss)


def test_paired_batch_reuses_even_stage_batch():
    config = _config(algorithm='residual_droppath', mask_reuse='paired_batch', drop_rate=0.5)
    model, state, adam = _setup(config)
    X, Y = _batch(9)
    train_iteration(model, X, Y, config, state, adam)
    standard_on_stored = compute_gradients(model, X, Y, Mode.STANDARD).loss
    X2, Y2 = _batch(10, size=8)
    assert train_iteration(model, X2, Y2, config, state, adam) == standard_on_stored


def test_non_finite_loss_is_divergence():
    config = _config(algorithm='standard')
    model, state, adam = _setup(config)
    model.post.bias[0] = np.nan
    X, Y = _batch(11)
    with pytest.raises(DivergenceError):
        train_iteration(model, X, Y, config, state, adam)


def test_evaluate_examples():
    balanced = PointSet([[0.1, 0.2], [0.3, -0.4], [-0.5, 0.6], [0.7, 0.8]], [0, 1, 0, 1])
    always_zero = from_parameters({
        'pre.weight': np.zeros((2, 2)), 'pre.bias': np.zeros(2),
        'blocks.0.weight': np.zeros((2, 2)), 'blocks.0.bias': np.zeros(2),
        'post.weight': np.zeros((2, 2)), 'post.bias': [1.0, 0.0],
    })
    assert evaluate(always_zero, balanced) == 0.5

    tie = from_parameters({**always_zero.parameters(), 'post.bias': np.zeros(2)})
    assert evaluate(tie, balanced) == 0.5

    # logits = x，按 argmax 逐个数：对 对 对 错
    linear = from_parameters({
        'pre.weight': np.eye(2), 'pre.bias': np.zeros(2),
        'blocks.0.weight': np.zeros((2, 2)), 'blocks.0.bias': np.zeros(2),
        'post.weight': np.eye(2), 'post.bias': np.zeros(2),
    })
    points = PointSet([[1.0, 0.0], [0.0, 1.0], [2.0, 1.0], [1.0, 2.0]], [0, 1, 0, 0])
    assert evaluate(linear, points) == 0.75
    perfect = PointSet(points.points, [0, 1, 0, 1])
    assert evaluate(linear, perfect) == 1.0

    with pytest.raises(ValidationError):
        evaluate(linear, PointSet(np.zeros((0, 2)), []))


def test_train_zero_epochs_returns_init():
    data = generate_spiral(SpiralParams(64, 0))
    model, metrics = train(_config(epochs=0, seed=3), data)
    init = init_model(2, 3, 3)
    for name, value in init.parameters().items():
        assert np.array_equal(model.parameters()[name], value)
    assert metrics.iterations == []
    assert metrics.final_train_acc is None


def test_train_iteration_count_and_records():
    data = generate_spiral(SpiralParams(64, 0))
    config = _config(epochs=3, batch_size=20)
    model, metrics = train(config, data)
    # ceil(64 / 20) = 4 个 batch 每个 epoch
    assert len(metrics.iterations) == 12
    assert [r.iteration for r in metrics.iterations] == list(range(12))
    assert [r.stage for r in metrics.iterations] == list(range(12))
    assert [r.epoch for r in metrics.epochs] == [1, 2, 3]
    boundary = [r.train_acc is not None for r in metrics.iterations]
    assert boundary == [False, False, False, True] * 3
    assert metrics.final_train_acc == evaluate(model, data)


def test_train_is_deterministic():
    data = generate_spiral(SpiralParams(128, 1))
    config = _config(drop_rate=0.2, epochs=2)
    _, first = train(config, data)
    _, second = train(config, data)
    assert first == second


def test_zero_drop_rate_droppath_matches_standard():
    data = generate_spiral(SpiralParams(96, 2))
    model_a, standard = train(_config(algorithm='standard', drop_rate=0.0), data)
    model_b, droppath = train(_config(algorithm='droppath', drop_rate=0.0), data)
    assert standard == droppath
    for name, value in model_a.parameters().items():
        assert np.array_equal(model_b.parameters()[name], value)


def test_stage_column_is_minus_one_outside_residual_droppath():
    data = generate_spiral(SpiralParams(32, 0))
    _, metrics = train(_config(algorithm='droppath', epochs=1), data)
    assert {r.stage for r in metrics.iterations} == {-1}


def test_metrics_csv(tmp_path):
    data = generate_spiral(SpiralParams(32, 0))
    eval_data = generate_spiral(SpiralParams(16, 1))
    _, metrics = train(_config(epochs=2, batch_size=16), data, eval_data)
    metrics.write_csv(tmp_path / 'metrics.csv')
    metrics.write_epochs_csv(tmp_path / 'epochs.csv')
    lines = (tmp_path / 'metrics.csv').read_text(encoding='utf-8').splitlines()
    assert lines[0] == 'iter,epoch,stage,loss,train_acc'
    assert len(lines) == 5
    assert lines[1].endswith(',')
    assert not lines[2].endswith(',')
    epochs = (tmp_path / 'epochs.csv').read_text(encoding='utf-8').splitlines()
    assert epochs[0] == 'epoch,train_acc,eval_acc'
    assert len(epochs) == 3
    assert all(line.split(',')[2] for line in epochs[1:])


def test_trainer_calls_epoch_hook_and_stops():
    data = generate_spiral(SpiralParams(32, 0))
    seen = []
    trainer = Trainer(_config(epochs=5), data, progress=False)

    def on_epoch_end(epoch, model):
        seen.append(epoch)
        if epoch == 2:
            trainer.stop()

    trainer.on_epoch_end = on_epoch_end
    _, metrics = trainer.run()
    assert seen == [0, 1, 2]
    assert len(metrics.epochs) == 2


def test_trainer_attaches_metrics_on_divergence(monkeypatch):
    import training

    calls = []
    original = training.train_iteration

    def diverge_later(model, X, Y, config, state, adam):
        calls.append(1)
        if len(calls) > 2:
            raise DivergenceError('loss diverged')
        return original(model, X, Y, config, state, adam)

    monkeypatch.setattr(training, 'train_iteration', diverge_later)
    data = generate_spiral(SpiralParams(32, 0))
    with pytest.raises(DivergenceError) as info:
        train(_config(epochs=3, batch_size=16), data)
    assert len(info.value.metrics.iterations) == 2
    assert len(info.value.metrics.epochs) == 1


def test_batches_are_shared_between_algorithms():
    # mask 随机流独立于 batch 顺序
    data = generate_spiral(SpiralParams(64, 0))
    first = [X for X, _ in batch_iterator(data, 16, 123)]
    rng = mask_rng(0)
    sample_mask(16, 0.5, rng)
    second = [X for X, _ in batch_iterator(data, 16, 123)]
    assert all(np.array_equal(a, b) for a, b in zip(first, second))


@pytest.mark.slow
def test_toy_run_reaches_high_accuracy():
    data = generate_spiral(SpiralParams(16384, 0))
    config = TrainConfig(algorithm=Algorithm.STANDARD)
    _, metrics = train(config, data)
    assert metrics.final_train_acc >= 0.95
