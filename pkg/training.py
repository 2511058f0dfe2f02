import contextlib
import csv
import enum
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from tqdm import tqdm
from tqdm.contrib.logging import logging_redirect_tqdm

from dataset import batch_iterator, format_float
from errors import DimensionError, DivergenceError, StateError, ValidationError
from model import DropMask, bind, forward_droppath, forward_stage2, forward_standard, init_model, predict
from tensor_engine import backward, softmax_cross_entropy

logger = logging.getLogger(__name__)

METRICS_HEADER = ['iter', 'epoch', 'stage', 'loss', 'train_acc']
EPOCHS_HEADER = ['epoch', 'train_acc', 'eval_acc']
EVAL_CHUNK = 4096


class Algorithm(str, enum.Enum):
    STANDARD = 'standard'
    DROPPATH = 'droppath'
    RESIDUAL_DROPPATH = 'residual_droppath'


class MaskReuse(str, enum.Enum):
    LITERAL = 'literal'
    PAIRED_BATCH = 'paired_batch'


class Mode(enum.Enum):
    STANDARD = 'standard'
    DROPPATH = 'droppath'
    STAGE2 = 'stage2'


@dataclass(frozen=True)
class TrainConfig:
    algorithm: Algorithm = Algorithm.RESIDUAL_DROPPATH
    depth: int = 6
    hidden: int = 6
    lr: float = 0.1
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 1000
    batch_size: int = 256
    drop_rate: float = 0.1
    seed: int = 0
    mask_reuse: MaskReuse = MaskReuse.LITERAL

    def __post_init__(self):
        try:
            object.__setattr__(self, 'algorithm', Algorithm(self.algorithm))
        except ValueError:
            raise ValidationError(f'unknown algorithm: {self.algorithm}') from None
        try:
            object.__setattr__(self, 'mask_reuse', MaskReuse(self.mask_reuse))
        except ValueError:
            raise ValidationError(f'unknown mask reuse mode: {self.mask_reuse}') from None
        object.__setattr__(self, 'betas', tuple(float(b) for b in self.betas))
        self.validate()

    def validate(self):
        if not 0.0 <= self.drop_rate < 1.0:
            raise ValidationError('drop rate must be in [0, 1)')
        if self.lr <= 0:
            raise ValidationError('learning rate must be positive')
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValidationError('betas must be two values in [0, 1)')
        if self.eps <= 0:
            raise ValidationError('eps must be positive')
        if self.depth < 1 or self.hidden < 1:
            raise ValidationError('depth and hidden must be at least 1')
        if self.epochs < 0:
            raise ValidationError('epochs must not be negative')
        if self.batch_size < 1:
            raise ValidationError('batch size must be at least 1')
        if self.seed < 0:
            raise ValidationError('seed must not be negative')

    def to_dict(self):
        data = asdict(self)
        data['algorithm'] = self.algorithm.value
        data['mask_reuse'] = self.mask_reuse.value
        data['betas'] = list(self.betas)
        return data


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls({name: np.zeros_like(p) for name, p in params.items()},
                   {name: np.zeros_like(p) for name, p in params.items()})


@dataclass
class IterationRecord:
    iteration: int
    epoch: int
    stage: int
    loss: float
    train_acc: float = None


@dataclass
class EpochRecord:
    epoch: int
    train_acc: float
    eval_acc: float = None


@dataclass
class MetricsTable:
    iterations: list = field(default_factory=list)
    epochs: list = field(default_factory=list)

    @property
    def final_train_acc(self):
        return self.epochs[-1].train_acc if self.epochs else None

    def write_csv(self, file_path):
        with open(file_path, 'w', encoding='utf-8', newline='') as file:
            writer = csv.writer(file, lineterminator='\n')
            writer.writerow(METRICS_HEADER)
            for record in self.iterations:
                writer.writerow([record.iteration, record.epoch, record.stage, format_float(record.loss),
                                 '' if record.train_acc is None else format_float(record.train_acc)])

    def write_epochs_csv(self, file_path):
        with open(file_path, 'w', encoding='utf-8', newline='') as file:
            writer = csv.writer(file, lineterminator='\n')
            writer.writerow(EPOCHS_HEADER)
            for record in self.epochs:
                writer.writerow([record.epoch, format_float(record.train_acc),
                                 '' if record.eval_acc is None else format_float(record.eval_acc)])


@dataclass
class TrainerState:
    rng: np.random.Generator
    stage: int = 0
    stored_masks: list = None
    stored_batch: tuple = None
    iteration: int = 0
    metrics: MetricsTable = field(default_factory=MetricsTable)


@dataclass
class GradientResult:
    loss: float
    grads: dict
    frozen: frozenset


def mask_rng(seed):
    # mask 用独立的随机流，和 batch 顺序互不影响
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))


def epoch_seed(seed, epoch):
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1, np.uint64)[0])


def sample_mask(batch_size, drop_rate, rng, block_index=0):
    if not 0.0 <= drop_rate < 1.0:
        raise ValidationError('drop rate must be in [0, 1)')
    # 1 = 保留（概率 1-p），0 = 丢弃
    return DropMask((rng.random((batch_size, 1)) >= drop_rate).astype(np.float64), block_index)


def sample_masks(depth, batch_size, drop_rate, rng):
    return [sample_mask(batch_size, drop_rate, rng, index) for index in range(depth)]


def fit_masks(masks, batch_size):
    # 截断到较小的 batch；batch 变大时循环补齐
    fitted = []
    for mask in masks:
        if mask.batch_size == batch_size:
            fitted.append(mask)
        elif mask.batch_size > batch_size:
            fitted.append(DropMask(mask.values[:batch_size], mask.block_index))
        else:
            fitted.append(DropMask(np.resize(mask.values, (batch_size, 1)), mask.block_index))
    return fitted


def frozen_blocks(mode, masks):
    if mode is Mode.STANDARD or masks is None:
        return frozenset()
    # 整个 block 在反传中权重全为 0：droppath 全丢弃，stage2 全保留
    dead = 0.0 if mode is Mode.DROPPATH else 1.0
    names = set()
    for mask in masks:
        if np.all(mask.values == dead):
            names.update({f'blocks.{mask.block_index}.weight', f'blocks.{mask.block_index}.bias'})
    return frozenset(names)


def compute_gradients(model, X, Y, mode, masks=None, scale_keep=False, keep_prob=1.0):
    params = bind(model)
    if mode is Mode.STANDARD:
        logits = forward_standard(model, X, params)
    elif mode is Mode.DROPPATH:
        logits = forward_droppath(model, X, masks, scale_keep, keep_prob, params)
    else:
        logits = forward_stage2(model, X, masks, params)
    loss = softmax_cross_entropy(logits, Y)
    grads = params.gradients(backward(loss))
    return GradientResult(float(loss.data), grads, frozen_blocks(mode, masks))


def adam_step(params, grads, state, lr, betas, eps, skip=frozenset()):
    for name, grad in grads.items():
        if np.any(np.isnan(grad)):
            raise DivergenceError(f'NaN gradient in parameter {name}', parameter=name)

    beta1, beta2 = betas
    state.t += 1
    correction1 = 1.0 - beta1 ** state.t
    correction2 = 1.0 - beta2 ** state.t
    for name, param in params.items():
        if name in skip:
            continue
        grad = grads[name]
        if grad.shape != param.shape or state.m[name].shape != param.shape:
            raise DimensionError(f'{name}: parameter {param.shape} vs gradient {grad.shape}')
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        # 原地更新，模型里的数组直接变化
        param -= lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
    return params, state


def train_iteration(model, X, Y, config, trainer_state, adam_state):
    algorithm = config.algorithm
    keep_prob = 1.0 - config.drop_rate
    if algorithm is Algorithm.STANDARD:
        result = compute_gradients(model, X, Y, Mode.STANDARD)
    elif algorithm is Algorithm.DROPPATH:
        masks = sample_masks(config.depth, len(X), config.drop_rate, trainer_state.rng)
        result = compute_gradients(model, X, Y, Mode.DROPPATH, masks, scale_keep=True, keep_prob=keep_prob)
    elif trainer_state.stage % 2 == 0:
        masks = sample_masks(config.depth, len(X), config.drop_rate, trainer_state.rng)
        trainer_state.stored_masks = masks
        trainer_state.stored_batch = (X, Y)
        # ResidualDroppath 第一阶段不做 1/keep_prob 缩放
        result = compute_gradients(model, X, Y, Mode.DROPPATH, masks, scale_keep=False)
    else:
        if trainer_state.stored_masks is None:
            raise StateError(f'stage {trainer_state.stage} is odd but no masks are stored')
        if config.mask_reuse is MaskReuse.PAIRED_BATCH:
            X, Y = trainer_state.stored_batch
        masks = fit_masks(trainer_state.stored_masks, len(X))
        if masks[0].batch_size != trainer_state.stored_masks[0].batch_size:
            logger.debug('mask batch %d -> %d', trainer_state.stored_masks[0].batch_size, len(X))
        result = compute_gradients(model, X, Y, Mode.STAGE2, masks)
        trainer_state.stored_masks = None
        trainer_state.stored_batch = None

    if not np.isfinite(result.loss):
        raise DivergenceError(f'loss diverged at iteration {trainer_state.iteration}')
    adam_step(model.parameters(), result.grads, adam_state, config.lr, config.betas, config.eps,
              skip=result.frozen)
    if algorithm is Algorithm.RESIDUAL_DROPPATH:
        trainer_state.stage += 1
    trainer_state.iteration += 1
    return result.loss


def evaluate(model, data):
    if len(data) == 0:
        raise ValidationError('cannot evaluate on an empty dataset')
    correct = 0
    for start in range(0, len(data), EVAL_CHUNK):
        logits = predict(model, data.points[start:start + EVAL_CHUNK])
        # argmax 取第一个最大值，平局归到较小的类
        correct += int(np.sum(np.argmax(logits, axis=1) == data.labels[start:start + EVAL_CHUNK]))
    return correct / len(data)


class Trainer:

    def __init__(self, config, data, eval_data=None, on_epoch_end=None, progress=True):
        self.config = config
        self.data = data
        self.eval_data = eval_data
        self.on_epoch_end = on_epoch_end
        self.progress = progress
        self._is_running = True

    def run(self):
        config = self.config
        model = init_model(config.depth, config.hidden, config.seed)
        adam_state = AdamState.zeros_like(model.parameters())
        state = TrainerState(rng=mask_rng(config.seed))
        if self.on_epoch_end:
            self.on_epoch_end(0, model)

        # 只在显示进度条时接管 root logger 的 handler
        redirect = logging_redirect_tqdm() if self.progress else contextlib.nullcontext()
        with redirect:
            bar = tqdm(range(1, config.epochs + 1), desc=config.algorithm.value, unit='epoch',
                       disable=not self.progress, leave=False)
            for epoch in bar:
                if not self._is_running:
                    logger.warning('训练已停止，第 %d 个 epoch 未执行', epoch)
                    break
                try:
                    self._run_epoch(model, epoch, state, adam_state)
                except DivergenceError as e:
                    e.metrics = state.metrics
                    logger.error('第 %d 个 epoch 发散: %s', epoch, e)
                    raise
                self._update_progress(bar, state.metrics.epochs[-1])
                if self.on_epoch_end:
                    self.on_epoch_end(epoch, model)
            bar.close()

        logger.info('%s 训练完成: %d 次迭代, train_acc=%s', config.algorithm.value, state.iteration,
                    state.metrics.final_train_acc)
        return model, state.metrics

    def stop(self):
        self._is_running = False

    def _run_epoch(self, model, epoch, state, adam_state):
        config = self.config
        for X, Y in batch_iterator(self.data, config.batch_size, epoch_seed(config.seed, epoch)):
            stage = state.stage if config.algorithm is Algorithm.RESIDUAL_DROPPATH else -1
            iteration = state.iteration
            loss = train_iteration(model, X, Y, config, state, adam_state)
            state.metrics.iterations.append(IterationRecord(iteration, epoch, stage, loss))

        train_acc = evaluate(model, self.data)
        eval_acc = evaluate(model, self.eval_data) if self.eval_data is not None else None
        state.metrics.iterations[-1].train_acc = train_acc
        state.metrics.epochs.append(EpochRecord(epoch, train_acc, eval_acc))

    def _update_progress(self, bar, record):
        bar.set_postfix(acc=f'{record.train_acc:.4f}')
        logger.debug('epoch %d train_acc=%.6f eval_acc=%s', record.epoch, record.train_acc, record.eval_acc)


def train(config, data, eval_data=None, on_epoch_end=None, progress=False):
    return Trainer(config, data, eval_data, on_epoch_end, progress).run()
