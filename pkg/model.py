import logging
from dataclasses import dataclass, field

import numpy as np

from errors import DimensionError, ValidationError
from tensor_engine import Tape, add_broadcast, detach, gelu, matmul, mul_mask, scale, transpose

logger = logging.getLogger(__name__)

INPUT_DIM = 2
NUM_CLASSES = 2


@dataclass
class Affine:
    weight: np.ndarray  # out × in
    bias: np.ndarray    # out

    @property
    def size(self):
        return self.weight.size + self.bias.size


@dataclass
class ResidualMLP:
    pre: Affine
    blocks: list
    post: Affine

    @property
    def depth(self):
        return len(self.blocks)

    @property
    def hidden(self):
        return self.pre.weight.shape[0]

    @property
    def parameter_count(self):
        return self.pre.size + sum(block.size for block in self.blocks) + self.post.size

    def parameters(self):
        params = {'pre.weight': self.pre.weight, 'pre.bias': self.pre.bias}
        for index, block in enumerate(self.blocks):
            params[f'blocks.{index}.weight'] = block.weight
            params[f'blocks.{index}.bias'] = block.bias
        params['post.weight'] = self.post.weight
        params['post.bias'] = self.post.bias
        return params

    def copy(self):
        return from_parameters({name: value.copy() for name, value in self.parameters().items()})


def expected_shapes(depth, hidden):
    shapes = {'pre.weight': (hidden, INPUT_DIM), 'pre.bias': (hidden,)}
    for index in range(depth):
        shapes[f'blocks.{index}.weight'] = (hidden, hidden)
        shapes[f'blocks.{index}.bias'] = (hidden,)
    shapes['post.weight'] = (NUM_CLASSES, hidden)
    shapes['post.bias'] = (NUM_CLASSES,)
    return shapes


def from_parameters(params):
    depth = sum(1 for name in params if name.startswith('blocks.') and name.endswith('.weight'))
    if 'pre.weight' not in params:
        raise ValidationError('missing parameter pre.weight')
    hidden = np.shape(params['pre.weight'])[0]
    shapes = expected_shapes(depth, hidden)
    if set(params) != set(shapes):
        raise ValidationError(f'unexpected parameter names: {sorted(set(params) ^ set(shapes))}')
    arrays = {}
    for name, shape in shapes.items():
        array = np.asarray(params[name], dtype=np.float64)
        if array.shape != shape:
            raise DimensionError(f'{name}: expected shape {shape}, got {array.shape}')
        arrays[name] = array
    return ResidualMLP(
        pre=Affine(arrays['pre.weight'], arrays['pre.bias']),
        blocks=[Affine(arrays[f'blocks.{i}.weight'], arrays[f'blocks.{i}.bias']) for i in range(depth)],
        post=Affine(arrays['post.weight'], arrays['post.bias']),
    )


def init_model(depth, hidden, seed):
    if depth < 1 or hidden < 1:
        raise ValidationError('depth and hidden must be at least 1')
    rng = np.random.default_rng(seed)

    # He 初始化，bias 全零
    def affine(fan_out, fan_in):
        weight = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
        return Affine(weight, np.zeros(fan_out))

    pre = affine(hidden, INPUT_DIM)
    blocks = [affine(hidden, hidden) for _ in range(depth)]
    post = affine(NUM_CLASSES, hidden)
    return ResidualMLP(pre, blocks, post)


@dataclass
class DropMask:
    values: np.ndarray
    block_index: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1, 1)
        if not np.all((self.values == 0.0) | (self.values == 1.0)):
            raise ValidationError(f'mask for block {self.block_index} is not binary')

    @property
    def batch_size(self):
        return len(self.values)

    @classmethod
    def ones(cls, batch_size, block_index):
        return cls(np.ones((batch_size, 1)), block_index)

    @classmethod
    def zeros(cls, batch_size, block_index):
        return cls(np.zeros((batch_size, 1)), block_index)


@dataclass
class FeatureStack:
    layers: list
    grid_input: np.ndarray

    def __post_init__(self):
        shapes = {layer.shape for layer in self.layers}
        if len(shapes) != 1 or self.layers[0].shape[0] != len(self.grid_input):
            raise DimensionError(f'feature layers disagree: {sorted(shapes)}')

    @property
    def depth(self):
        return len(self.layers) - 1

    @property
    def hidden(self):
        return self.layers[0].shape[1]

    @property
    def grid_size(self):
        return len(self.grid_input)


class BoundParams:
    """把模型参数注册成 tape 上的 leaf，反传后按名字取梯度。"""

    def __init__(self, model, tape=None):
        self.model = model
        self.tape = tape if tape is not None else Tape()
        # 参数不做有限性检查，NaN 会传到 loss 上按发散处理
        self.tensors = {name: self.tape.leaf(value, name, check_finite=False)
                        for name, value in model.parameters().items()}

    def __getitem__(self, name):
        return self.tensors[name]

    def gradients(self, grads):
        return {name: grads[tensor] for name, tensor in self.tensors.items()}


def bind(model, tape=None):
    return BoundParams(model, tape)


def _affine(x, params, prefix):
    return add_broadcast(matmul(x, transpose(params[prefix + '.weight'])), params[prefix + '.bias'])


def _check_input(X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != INPUT_DIM:
        raise DimensionError(f'input must be B×{INPUT_DIM}, got {X.shape}')
    return X


def _check_masks(model, masks, batch_size):
    if len(masks) != model.depth:
        raise ValidationError(f'expected {model.depth} masks, got {len(masks)}')
    for mask in masks:
        if mask.batch_size != batch_size:
            raise ValidationError(
                f'mask for block {mask.block_index} has batch {mask.batch_size}, input has {batch_size}')


def _run(model, X, params, branch, features=None):
    X = _check_input(X)
    if params is None:
        params = bind(model)
    h = _affine(params.tape.constant(X, 'X'), params, 'pre')
    if features is not None:
        features.append(h.data)
    for index in range(model.depth):
        step = gelu(_affine(h, params, f'blocks.{index}'))
        # 残差包住整个 block
        h = add_broadcast(h, branch(index, step))
        if features is not None:
            features.append(h.data)
    return _affine(h, params, 'post')


def forward_standard(model, X, params=None):
    return _run(model, X, params, lambda index, step: step)


def forward_droppath(model, X, masks, scale_keep=False, keep_prob=1.0, params=None):
    X = _check_input(X)
    _check_masks(model, masks, len(X))
    if not 0.0 < keep_prob <= 1.0:
        raise ValidationError('keep_prob must be in (0, 1]')
    factor = 1.0 / keep_prob

    def branch(index, step):
        if scale_keep:
            step = scale(step, factor)
        return mul_mask(step, masks[index].values)

    return _run(model, X, params, branch)


def forward_stage2(model, X, masks, params=None):
    X = _check_input(X)
    _check_masks(model, masks, len(X))

    def branch(index, step):
        kept = masks[index].values
        # 上一轮保留的行冻结，丢弃的行参与训练
        return add_broadcast(mul_mask(detach(step), kept), mul_mask(step, 1.0 - kept))

    return _run(model, X, params, branch)


def predict(model, X):
    return forward_standard(model, X).data


def extract_features(model, grid):
    layers = []
    _run(model, grid.points, None, lambda index, step: step, features=layers)
    return FeatureStack(layers, np.array(grid.points))
