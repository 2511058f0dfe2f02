import csv
import logging
from dataclasses import dataclass

import numpy as np

from errors import ValidationError

logger = logging.getLogger(__name__)

CSV_HEADER = ['x1', 'x2', 'label']


def format_float(value):
    # 17 位有效数字，读回来逐位一致
    return '%.17g' % value


@dataclass(frozen=True)
class LabeledPoint:
    x: tuple
    label: int


@dataclass(frozen=True)
class SpiralParams:
    n_samples: int = 16384
    seed: int = 0

    def validate(self):
        if self.n_samples < 2 or self.n_samples % 2:
            raise ValidationError('n must be even')


class PointSet:
    """点和标签按数组存放，按下标取出 LabeledPoint。"""

    def __init__(self, points, labels):
        self.points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        self.labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if len(self.points) != len(self.labels):
            raise ValidationError(f'{len(self.points)} points but {len(self.labels)} labels')

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, index):
        x1, x2 = self.points[index]
        return LabeledPoint((float(x1), float(x2)), int(self.labels[index]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, indices):
        return PointSet(self.points[indices], self.labels[indices])


@dataclass(frozen=True)
class GridProbe:
    points: np.ndarray
    axis_resolution: int

    def __len__(self):
        return len(self.points)


def spiral_points(alphas):
    alphas = np.asarray(alphas, dtype=np.float64)
    rs = alphas / (2.0 * np.pi)
    class0 = np.stack([rs * np.sin(alphas), rs * np.cos(alphas)], axis=1)
    # 相位差 π：sin/cos 同时取反，直接取负保证严格点对称
    class1 = -class0
    return class0, class1


def generate_spiral(params):
    params.validate()
    rng = np.random.default_rng(params.seed)
    pairs = params.n_samples // 2
    alphas = rng.uniform(0.0, 2.0 * np.pi, size=pairs)
    class0, class1 = spiral_points(alphas)
    labels = np.concatenate([np.zeros(pairs, dtype=np.int64), np.ones(pairs, dtype=np.int64)])
    logger.debug('生成螺旋数据 %d 个点 (seed=%d)', params.n_samples, params.seed)
    return PointSet(np.concatenate([class0, class1]), labels)


def generate_grid(axis_resolution=50):
    if axis_resolution < 2:
        raise ValidationError('grid resolution must be at least 2')
    axis = np.linspace(-1.0, 1.0, axis_resolution)
    # 行优先：x2 外层，x1 内层
    x1, x2 = np.meshgrid(axis, axis)
    return GridProbe(np.stack([x1.ravel(), x2.ravel()], axis=1), axis_resolution)


def epoch_permutation(n, seed):
    return np.random.default_rng(seed).permutation(n)


def batch_iterator(data, batch_size, epoch_seed):
    if batch_size < 1:
        raise ValidationError('batch size must be at least 1')
    if len(data) == 0:
        raise ValidationError('cannot iterate over an empty dataset')
    order = epoch_permutation(len(data), epoch_seed)
    # 最后一个不满的 batch 保留
    for start in range(0, len(order), batch_size):
        indices = order[start:start + batch_size]
        yield data.points[indices], data.labels[indices]


def split_eval(data, fraction, seed):
    if not 0.0 <= fraction < 1.0:
        raise ValidationError('eval fraction must be in [0, 1)')
    n_eval = int(round(len(data) * fraction))
    if n_eval == 0:
        return data, None
    order = epoch_permutation(len(data), seed)
    return data.subset(np.sort(order[n_eval:])), data.subset(np.sort(order[:n_eval]))


def write_csv(data, file_path):
    with open(file_path, 'w', encoding='utf-8', newline='') as file:
        writer = csv.writer(file, lineterminator='\n')
        writer.writerow(CSV_HEADER)
        for (x1, x2), label in zip(data.points, data.labels):
            writer.writerow([format_float(x1), format_float(x2), int(label)])


def read_csv(file_path):
    with open(file_path, 'r', encoding='utf-8', newline='') as file:
        reader = csv.reader(file)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise ValidationError(f'{file_path}: expected header {",".join(CSV_HEADER)}')
        rows = [row for row in reader if row]
    try:
        points = [(float(x1), float(x2)) for x1, x2, _ in rows]
        labels = [int(label) for _, _, label in rows]
    except ValueError as e:
        raise ValidationError(f'{file_path}: {e}') from e
    return PointSet(np.array(points).reshape(-1, 2), labels)
