"""基于 tape 的反向自动微分，float64，带 detach 和有限差分校验。"""
import enum
import logging
from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np
from scipy.special import erf, log_softmax

from errors import DimensionError, ValidationError

logger = logging.getLogger(__name__)

DTYPE = np.float64
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class OpKind(enum.Enum):
    LEAF = 'leaf'
    CONSTANT = 'constant'
    MATMUL = 'matmul'
    TRANSPOSE = 'transpose'
    ADD = 'add'
    MUL_MASK = 'mul_mask'
    SCALE = 'scale'
    GELU = 'gelu'
    SOFTMAX_CE = 'softmax_cross_entropy'
    DETACH = 'detach'
    SUM = 'sum'


@dataclass
class TapeNode:
    op: OpKind
    inputs: tuple
    value: np.ndarray
    backward_fn: object = None
    detached: bool = False
    name: str = ''


class Tape:
    # 只追加；一次迭代一条 tape，用完 reset
    def __init__(self):
        self.nodes = []
        self.generation = 0

    def __len__(self):
        return len(self.nodes)

    def reset(self):
        self.nodes = []
        self.generation += 1

    def leaf(self, value, name='', check_finite=True):
        value = _as_array(value, name or 'leaf') if check_finite else np.array(value, dtype=DTYPE)
        return self._record(OpKind.LEAF, value, name=name)

    def constant(self, value, name=''):
        return self._record(OpKind.CONSTANT, _as_array(value, name or 'constant'), name=name)

    def node(self, tensor):
        self.check(tensor)
        return self.nodes[tensor.node_id]

    def check(self, tensor):
        if tensor.tape is not self:
            raise ValidationError('tensor belongs to a different tape')
        if tensor.generation != self.generation:
            raise ValidationError('tensor belongs to a tape that has been reset')

    def _record(self, op, value, inputs=(), backward_fn=None, detached=False, name=''):
        self.nodes.append(TapeNode(op, tuple(inputs), value, backward_fn, detached, name))
        return Tensor(self, len(self.nodes) - 1)


class Tensor:
    __slots__ = ('tape', 'node_id', 'generation')

    def __init__(self, tape, node_id):
        self.tape = tape
        self.node_id = node_id
        self.generation = tape.generation

    @property
    def data(self):
        return self.tape.node(self).value

    @property
    def shape(self):
        return self.data.shape

    @property
    def op(self):
        return self.tape.node(self).op

    def __repr__(self):
        return f'Tensor(id={self.node_id}, op={self.op.value}, shape={self.shape})'


class GradientMap(Mapping):
    """node id（或 Tensor）-> 梯度；没有被反传到的节点返回全零。"""

    def __init__(self, tape, grads):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, key):
        node_id = key.node_id if isinstance(key, Tensor) else int(key)
        if not 0 <= node_id < len(self._tape.nodes):
            raise KeyError(node_id)
        grad = self._grads[node_id] if node_id < len(self._grads) else None
        if grad is None:
            return np.zeros_like(self._tape.nodes[node_id].value)
        return grad

    def __iter__(self):
        return iter(range(len(self._tape.nodes)))

    def __len__(self):
        return len(self._tape.nodes)

    def reached(self, key):
        node_id = key.node_id if isinstance(key, Tensor) else int(key)
        return node_id < len(self._grads) and self._grads[node_id] is not None


def _as_array(value, what):
    array = np.array(value, dtype=DTYPE)
    if not np.all(np.isfinite(array)):
        raise ValidationError(f'{what}: non-finite values')
    return array


def _same_tape(*tensors):
    tape = tensors[0].tape
    for tensor in tensors:
        tape.check(tensor)
    return tape


def _mask_array(mask):
    values = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=DTYPE)
    if not np.all((values == 0.0) | (values == 1.0)):
        raise ValidationError('mask entries must be 0 or 1')
    return values


def matmul(a, b):
    tape = _same_tape(a, b)
    av, bv = a.data, b.data
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise DimensionError(f'matmul: cannot multiply {av.shape} by {bv.shape}')

    def backward_fn(g):
        return g @ bv.T, av.T @ g

    return tape._record(OpKind.MATMUL, av @ bv, (a.node_id, b.node_id), backward_fn)


def transpose(x):
    tape = _same_tape(x)
    xv = x.data
    if xv.ndim != 2:
        raise DimensionError(f'transpose: expected a matrix, got {xv.shape}')
    return tape._record(OpKind.TRANSPOSE, np.ascontiguousarray(xv.T), (x.node_id,),
                        lambda g: (np.ascontiguousarray(g.T),))


def add_broadcast(a, b):
    tape = _same_tape(a, b)
    av, bv = a.data, b.data
    if av.shape == bv.shape:
        def backward_fn(g):
            return g, g
    elif av.ndim == 2 and bv.shape in ((av.shape[1],), (1, av.shape[1])):
        b_shape = bv.shape

        def backward_fn(g):
            return g, g.sum(axis=0).reshape(b_shape)
    else:
        raise DimensionError(f'add_broadcast: incompatible shapes {av.shape} and {bv.shape}')
    return tape._record(OpKind.ADD, av + bv, (a.node_id, b.node_id), backward_fn)


def mul_mask(x, mask):
    tape = _same_tape(x)
    xv = x.data
    mv = _mask_array(mask)
    if xv.ndim != 2 or mv.shape != (xv.shape[0], 1):
        raise DimensionError(f'mul_mask: mask {mv.shape} does not match input {xv.shape}')
    # mask 是常量，不接收梯度
    return tape._record(OpKind.MUL_MASK, xv * mv, (x.node_id,), lambda g: (g * mv,))


def scale(x, factor):
    tape = _same_tape(x)
    factor = float(factor)
    return tape._record(OpKind.SCALE, x.data * factor, (x.node_id,), lambda g: (g * factor,))


def gelu(x):
    tape = _same_tape(x)
    xv = x.data
    cdf = 0.5 * (1.0 + erf(xv / _SQRT2))

    def backward_fn(g):
        pdf = np.exp(-0.5 * xv * xv) * _INV_SQRT_2PI
        return (g * (cdf + xv * pdf),)

    return tape._record(OpKind.GELU, xv * cdf, (x.node_id,), backward_fn)


def softmax_cross_entropy(logits, labels):
    tape = _same_tape(logits)
    z = logits.data
    labels = np.asarray(labels)
    if z.ndim != 2 or z.shape[0] < 1:
        raise DimensionError(f'softmax_cross_entropy: logits must be B×C with B >= 1, got {z.shape}')
    batch, classes = z.shape
    if labels.shape != (batch,):
        raise DimensionError(f'softmax_cross_entropy: labels {labels.shape} do not match logits {z.shape}')
    if not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0 or labels.max() >= classes:
        raise ValidationError(f'labels must be class indices in [0, {classes})')

    rows = np.arange(batch)
    # log_softmax 内部减去行最大值
    log_probs = log_softmax(z, axis=1)
    loss = -log_probs[rows, labels].mean()

    def backward_fn(g):
        grad = np.exp(log_probs)
        grad[rows, labels] -= 1.0
        return (grad * (g / batch),)

    return tape._record(OpKind.SOFTMAX_CE, np.array(loss, dtype=DTYPE), (logits.node_id,), backward_fn)


def detach(x):
    tape = _same_tape(x)
    return tape._record(OpKind.DETACH, x.data, (x.node_id,), detached=True)


def reduce_sum(x):
    tape = _same_tape(x)
    xv = x.data
    return tape._record(OpKind.SUM, np.array(xv.sum(), dtype=DTYPE), (x.node_id,),
                        lambda g: (np.full_like(xv, g),))


def backward(loss):
    tape = _same_tape(loss)
    if loss.data.size != 1:
        raise ValidationError(f'backward needs a scalar loss, got shape {loss.shape}')

    grads = [None] * (loss.node_id + 1)
    grads[loss.node_id] = np.ones_like(loss.data)
    # 严格按创建顺序倒序，累加顺序固定
    for node_id in range(loss.node_id, -1, -1):
        upstream = grads[node_id]
        node = tape.nodes[node_id]
        if upstream is None or node.detached or node.backward_fn is None:
            continue
        for input_id, input_grad in zip(node.inputs, node.backward_fn(upstream)):
            if input_grad is None:
                continue
            if grads[input_id] is None:
                grads[input_id] = input_grad
            else:
                grads[input_id] = grads[input_id] + input_grad
    return GradientMap(tape, grads)


def finite_diff_gradient(f, x, h=1e-6):
    if h <= 0:
        raise ValidationError('finite difference step h must be positive')
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    grad = np.zeros_like(base)
    for index in np.ndindex(base.shape):
        plus = base.copy()
        minus = base.copy()
        plus[index] += h
        minus[index] -= h
        grad[index] = (float(f(plus)) - float(f(minus))) / (2.0 * h)
    return grad


def max_relative_error(analytic, numeric, floor=1e-3):
    analytic = np.asarray(analytic, dtype=DTYPE)
    numeric = np.asarray(numeric, dtype=DTYPE)
    if analytic.shape != numeric.shape:
        raise DimensionError(f'gradient shapes differ: {analytic.shape} vs {numeric.shape}')
    if analytic.size == 0:
        return 0.0
    denominator = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / denominator))
