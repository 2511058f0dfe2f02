import json
import logging
import os
from dataclasses import dataclass, field, replace

from errors import ValidationError
from training import TrainConfig

logger = logging.getLogger(__name__)

THREADS_ENV = 'RDP_THREADS'


def parse_int_list(text):
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    return [int(v) for v in str(text).split(',') if v.strip()]


def parse_float_list(text):
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).split(',') if v.strip()]


# flag 名 -> (所在对象, 字段名, 转换函数)
FLAGS = {
    'algorithm': ('train', 'algorithm', str),
    'depth': ('train', 'depth', int),
    'hidden': ('train', 'hidden', int),
    'lr': ('train', 'lr', float),
    'betas': ('train', 'betas', parse_float_list),
    'eps': ('train', 'eps', float),
    'epochs': ('train', 'epochs', int),
    'batch': ('train', 'batch_size', int),
    'drop-rate': ('train', 'drop_rate', float),
    'seed': ('train', 'seed', int),
    'mask-reuse': ('train', 'mask_reuse', str),
    'n': ('run', 'n_samples', int),
    'data-seed': ('run', 'data_seed', int),
    'eval-fraction': ('run', 'eval_fraction', float),
    'out': ('run', 'out_dir', str),
    'checkpoint-epochs': ('run', 'checkpoint_epochs', parse_int_list),
    'layers': ('run', 'panel_layers', parse_int_list),
    'nodes': ('run', 'panel_nodes', parse_int_list),
    'resolution': ('run', 'resolution', int),
}


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    n_samples: int = 16384
    data_seed: int = 0
    eval_fraction: float = 0.0
    out_dir: str = 'runs'
    checkpoint_epochs: tuple = ()
    panel_layers: tuple = None
    panel_nodes: tuple = None
    resolution: int = 50

    def __post_init__(self):
        object.__setattr__(self, 'checkpoint_epochs', tuple(sorted(set(self.checkpoint_epochs))))
        for name in ('panel_layers', 'panel_nodes'):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, tuple(value))
        self.validate()

    def validate(self):
        if self.n_samples < 2 or self.n_samples % 2:
            raise ValidationError('n must be even')
        if not 0.0 <= self.eval_fraction < 1.0:
            raise ValidationError('eval fraction must be in [0, 1)')
        if self.resolution < 2:
            raise ValidationError('grid resolution must be at least 2')
        if any(e < 0 or e > self.train.epochs for e in self.checkpoint_epochs):
            raise ValidationError(f'checkpoint epochs must lie in [0, {self.train.epochs}]')

    def to_dict(self):
        # 以 flag 名为 key 的扁平 dict，写进 checkpoint manifest；输出目录不算配置
        train = self.train.to_dict()
        data = {}
        for flag, (owner, name, _) in FLAGS.items():
            if flag == 'out':
                continue
            value = train[name] if owner == 'train' else getattr(self, name)
            data[flag] = list(value) if isinstance(value, tuple) else value
        return data

    def with_train(self, **changes):
        return replace(self, train=replace(self.train, **changes))


def read_config_file(file_path):
    try:
        with open(file_path, 'r', encoding='utf-8') as file:
            values = json.load(file)
    except OSError as e:
        raise ValidationError(f'cannot read config {file_path}: {e}') from e
    except json.JSONDecodeError as e:
        raise ValidationError(f'config {file_path} is not valid JSON: {e}') from e
    if not isinstance(values, dict):
        raise ValidationError(f'config {file_path} must be a JSON object')
    return values


def build_run_config(values):
    unknown = sorted(set(values) - set(FLAGS))
    if unknown:
        raise ValidationError(f'unknown config keys: {", ".join(unknown)}')
    train_kwargs, run_kwargs = {}, {}
    for flag, raw in values.items():
        if raw is None:
            continue
        owner, name, convert = FLAGS[flag]
        try:
            value = convert(raw)
        except (TypeError, ValueError) as e:
            raise ValidationError(f'--{flag}: invalid value {raw!r}') from e
        (train_kwargs if owner == 'train' else run_kwargs)[name] = value
    return RunConfig(train=TrainConfig(**train_kwargs), **run_kwargs)


def load_run_config(file_path=None, overrides=None):
    # 优先级：命令行 > 配置文件 > 默认值
    values = read_config_file(file_path) if file_path else {}
    for flag, value in (overrides or {}).items():
        if value is not None:
            values[flag] = value
    config = build_run_config(values)
    logger.debug('运行配置: %s', config.to_dict())
    return config


def harness_threads():
    raw = os.environ.get(THREADS_ENV, '1')
    try:
        threads = int(raw)
    except ValueError:
        threads = 0
    if threads < 1:
        raise ValidationError(f'{THREADS_ENV} must be a positive integer, got {raw!r}')
    return threads
