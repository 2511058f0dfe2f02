import csv
import logging
from dataclasses import dataclass

import numpy as np
import svgwrite
from lxml import etree

from dataset import format_float
from errors import SnapshotMissingError, ValidationError
from model import extract_features

logger = logging.getLogger(__name__)

CELL = 60
GAP = 10
MARGIN_LEFT = 50
MARGIN_TOP = 40
MARGIN = 20
STROKE_MIN, STROKE_MAX = 0.2, 4.0
WEIGHT_STROKE_SCALE = 2.0
SCATTER_PER_CELL = 120
COLOR_LEVELS = 32

WHITE = (255, 255, 255)
BLUE = (33, 102, 172)
RED = (178, 24, 43)
DARK_BLUE = (8, 48, 107)
ZERO_WEIGHT = '#999999'
CLASS_COLORS = ('#2166ac', '#b2182b')


@dataclass(frozen=True)
class SimilarityMatrix:
    values: np.ndarray
    distances: np.ndarray

    @property
    def depth(self):
        return len(self.values) - 1


@dataclass(frozen=True)
class PanelSpec:
    layers: tuple
    nodes: tuple
    resolution: int = 50
    bounds: str = 'symmetric'

    def validate(self, depth, hidden):
        if not self.layers or not self.nodes:
            raise ValidationError('panel spec needs at least one layer and one node')
        for what, values, upper in (('layers', self.layers, depth), ('nodes', self.nodes, hidden - 1)):
            if any(b <= a for a, b in zip(values, values[1:])):
                raise ValidationError(f'panel {what} must be strictly increasing')
            if values[0] < 0 or values[-1] > upper:
                raise ValidationError(f'panel {what} must lie in [0, {upper}]')
        if self.bounds != 'symmetric':
            raise ValidationError(f'unknown colormap bounds policy: {self.bounds}')


def _evenly_spaced(start, stop, limit):
    if stop - start + 1 <= limit:
        return tuple(range(start, stop + 1))
    return tuple(int(i) for i in np.unique(np.round(np.linspace(start, stop, limit)).astype(int)))


def default_panel_spec(depth, hidden, limit=8, resolution=50):
    # 深度、宽度太大时均匀抽样
    return PanelSpec(_evenly_spaced(1, depth, limit), _evenly_spaced(0, hidden - 1, limit), resolution)


def layer_similarity(features):
    layers = features.layers
    count = len(layers)
    distances = np.zeros((count, count))
    for l in range(count):
        for m in range(l + 1, count):
            # 网格点上两层 H 维特征的欧氏距离取平均
            distance = float(np.mean(np.linalg.norm(layers[l] - layers[m], axis=1)))
            distances[l, m] = distances[m, l] = distance
    return SimilarityMatrix(1.0 / (1.0 + distances), distances)


def _hex(rgb):
    return '#%02x%02x%02x' % tuple(int(round(c)) for c in rgb)


def _blend(low, high, t):
    return tuple(a + (b - a) * t for a, b in zip(low, high))


def diverging_color(t):
    t = round(float(np.clip(t, -1.0, 1.0)) * COLOR_LEVELS) / COLOR_LEVELS
    return _hex(_blend(WHITE, BLUE, t) if t >= 0 else _blend(WHITE, RED, -t))


_DIVERGING = {k: diverging_color(k / COLOR_LEVELS) for k in range(-COLOR_LEVELS, COLOR_LEVELS + 1)}


def sequential_color(t):
    t = round(float(np.clip(t, 0.0, 1.0)) * 2 * COLOR_LEVELS) / (2 * COLOR_LEVELS)
    return _hex(_blend(WHITE, DARK_BLUE, t))


def _raster(dwg, group, x, y, values, resolution):
    bound = float(np.max(np.abs(values)))
    scaled = values / bound if bound > 0 else np.zeros_like(values)
    levels = np.round(np.clip(scaled, -1.0, 1.0) * COLOR_LEVELS).astype(int)
    colors = [_DIVERGING[k] for k in levels]
    pixel = CELL / resolution
    for i in range(resolution):
        # x2 向上为正
        top = y + (resolution - 1 - i) * pixel
        row = colors[i * resolution:(i + 1) * resolution]
        start = 0
        # 同色连续像素合并成一个 rect
        for j in range(1, resolution + 1):
            if j == resolution or row[j] != row[start]:
                group.add(dwg.rect(insert=(round(x + start * pixel, 2), round(top, 2)),
                                   size=(round((j - start) * pixel, 2), round(pixel, 2)),
                                   fill=row[start], stroke='none'))
                start = j


def _to_cell(x, y, point):
    return round(x + (point[0] + 1.0) / 2.0 * CELL, 2), round(y + (1.0 - point[1]) / 2.0 * CELL, 2)


def _scatter(dwg, group, x, y, points, labels, limit):
    stride = max(1, len(points) // limit) if limit else 1
    for point, label in zip(points[::stride][:limit], labels[::stride][:limit]):
        group.add(dwg.circle(center=_to_cell(x, y, point), r=1.2,
                             fill=CLASS_COLORS[int(label)], stroke='none'))


def _weight_lines(dwg, group, x, y, weights):
    for q, weight in enumerate(weights):
        source_y = y + (q + 0.5) * CELL / len(weights)
        if weight > 0:
            color = CLASS_COLORS[0]
        elif weight < 0:
            color = CLASS_COLORS[1]
        else:
            color = ZERO_WEIGHT
        width = float(np.clip(abs(weight) * WEIGHT_STROKE_SCALE, STROKE_MIN, STROKE_MAX))
        group.add(dwg.line(start=(x, round(source_y, 2)), end=(x + CELL, y + CELL / 2),
                           stroke=color, stroke_width=round(width, 3)))


def _incoming_weights(model, layer, node, sources):
    if layer == 0:
        return model.pre.weight[node, :]
    return model.blocks[layer - 1].weight[node, list(sources)]


def render_feature_panel(model, grid, train_points, spec):
    spec.validate(model.depth, model.hidden)
    if grid.axis_resolution != spec.resolution:
        raise ValidationError(f'grid resolution {grid.axis_resolution} does not match panel {spec.resolution}')
    features = extract_features(model, grid)
    rows, cols = len(spec.nodes), 2 * len(spec.layers) + 1
    width = MARGIN_LEFT + cols * (CELL + GAP) + MARGIN
    height = MARGIN_TOP + rows * (CELL + GAP) + MARGIN
    dwg = svgwrite.Drawing(size=(width, height), profile='full', debug=False)
    dwg.add(dwg.rect(insert=(0, 0), size=(width, height), fill='white'))

    def origin(row, col):
        return MARGIN_LEFT + col * (CELL + GAP), MARGIN_TOP + row * (CELL + GAP)

    headers = ['input'] + [label for layer in spec.layers for label in (f'W{layer}', f'L{layer}')]
    for col, header in enumerate(headers):
        x, _ = origin(0, col)
        dwg.add(dwg.text(header, insert=(x + CELL / 2, MARGIN_TOP - 10), font_size=11,
                         text_anchor='middle', font_family='sans-serif'))

    last_col = cols - 1
    for row, node in enumerate(spec.nodes):
        _, y = origin(row, 0)
        dwg.add(dwg.text(f'n{node}', insert=(MARGIN_LEFT - 8, y + CELL / 2), font_size=11,
                         text_anchor='end', font_family='sans-serif'))
        for col in range(cols):
            x, y = origin(row, col)
            group = dwg.g(class_='cell')
            group['data-row'] = row
            group['data-col'] = col
            if col == 0:
                # 第一列只画输入维度，多出来的行留空
                if row < grid.points.shape[1]:
                    _raster(dwg, group, x, y, grid.points[:, row], grid.axis_resolution)
            else:
                layer = spec.layers[(col - 1) // 2]
                if col % 2 == 1:
                    sources = range(grid.points.shape[1]) if layer == 0 else spec.nodes
                    _weight_lines(dwg, group, x, y, _incoming_weights(model, layer, node, sources))
                else:
                    _raster(dwg, group, x, y, features.layers[layer][:, node], grid.axis_resolution)
                    if col == last_col and train_points is not None:
                        _scatter(dwg, group, x, y, train_points.points, train_points.labels,
                                 SCATTER_PER_CELL)
            dwg.add(group)
    return dwg.tostring()


def render_similarity_heatmap(matrix):
    values = matrix.values
    count = len(values)
    size = max(6, min(24, 480 // count))
    legend_x = MARGIN_LEFT + count * size + 30
    width = legend_x + 70
    height = MARGIN_TOP + count * size + 40
    dwg = svgwrite.Drawing(size=(width, height), profile='full', debug=False)
    dwg.add(dwg.rect(insert=(0, 0), size=(width, height), fill='white'))

    low = float(values.min())
    span = 1.0 - low

    def level(value):
        return 1.0 if span <= 0 else (value - low) / span

    font = max(5, min(11, size - 2))
    for index in range(count):
        dwg.add(dwg.text(str(index), insert=(MARGIN_LEFT - 4, MARGIN_TOP + (index + 0.75) * size),
                         font_size=font, text_anchor='end', font_family='sans-serif'))
        dwg.add(dwg.text(str(index), insert=(MARGIN_LEFT + (index + 0.5) * size, MARGIN_TOP - 4),
                         font_size=font, text_anchor='middle', font_family='sans-serif'))
    for l in range(count):
        for m in range(count):
            cell = dwg.rect(insert=(MARGIN_LEFT + m * size, MARGIN_TOP + l * size), size=(size, size),
                            fill=sequential_color(level(values[l, m])), class_='cell')
            cell.set_desc(title=f'{l},{m}: {values[l, m]:.6f}')
            dwg.add(cell)

    # 图例：上端 1，下端最小值
    steps = 10
    bar = count * size / steps
    for k in range(steps):
        t = 1.0 - k / (steps - 1)
        dwg.add(dwg.rect(insert=(legend_x, MARGIN_TOP + k * bar), size=(16, bar),
                         fill=sequential_color(t), class_='legend'))
    dwg.add(dwg.text('1', insert=(legend_x + 20, MARGIN_TOP + 10), font_size=10, font_family='sans-serif'))
    dwg.add(dwg.text(f'{low:.3f}', insert=(legend_x + 20, MARGIN_TOP + count * size),
                     font_size=10, font_family='sans-serif'))
    return dwg.tostring()


def render_dataset_scatter(data, max_points=400):
    side = 400
    dwg = svgwrite.Drawing(size=(side + 2 * MARGIN, side + 2 * MARGIN), profile='full', debug=False)
    dwg.add(dwg.rect(insert=(0, 0), size=(side + 2 * MARGIN, side + 2 * MARGIN), fill='white'))
    dwg.add(dwg.rect(insert=(MARGIN, MARGIN), size=(side, side), fill='none', stroke='#444444'))
    stride = max(1, len(data) // max_points)
    for (x1, x2), label in list(zip(data.points[::stride], data.labels[::stride]))[:max_points]:
        center = (round(MARGIN + (x1 + 1.0) / 2.0 * side, 2), round(MARGIN + (1.0 - x2) / 2.0 * side, 2))
        dwg.add(dwg.circle(center=center, r=2.5, fill=CLASS_COLORS[int(label)], class_='point'))
    return dwg.tostring()


def snapshot_training(snapshots, epochs, grid, spec, train_points=None):
    panels = {}
    for epoch in epochs:
        if epoch not in snapshots:
            raise SnapshotMissingError(f'no checkpoint for epoch {epoch}')
        panels[epoch] = render_feature_panel(snapshots[epoch], grid, train_points, spec)
        logger.debug('epoch %d 的特征图已生成', epoch)
    return panels


def validate_svg(document):
    if isinstance(document, str):
        document = document.encode('utf-8')
    try:
        root = etree.fromstring(document)
    except etree.XMLSyntaxError as e:
        raise ValidationError(f'malformed SVG: {e}') from e
    if etree.QName(root).localname != 'svg':
        raise ValidationError('root element is not <svg>')
    if not root.get('width') or not root.get('height'):
        raise ValidationError('SVG must declare width and height')
    return sum(1 for element in root.iter() if 'cell' in (element.get('class') or '').split())


def _write_matrix(values, file_path):
    with open(file_path, 'w', encoding='utf-8', newline='') as file:
        writer = csv.writer(file, lineterminator='\n')
        writer.writerow(['layer'] + list(range(len(values))))
        for index, row in enumerate(values):
            writer.writerow([index] + [format_float(v) for v in row])


def write_similarity_csv(matrix, base_path):
    _write_matrix(matrix.values, base_path + '.csv')
    _write_matrix(matrix.distances, base_path + '.dist.csv')


def write_feature_csv(features, file_path, layers=None, nodes=None):
    layers = range(len(features.layers)) if layers is None else layers
    nodes = range(features.hidden) if nodes is None else nodes
    with open(file_path, 'w', encoding='utf-8', newline='') as file:
        writer = csv.writer(file, lineterminator='\n')
        writer.writerow(['layer', 'node', 'x1', 'x2', 'value'])
        for layer in layers:
            values = features.layers[layer]
            for node in nodes:
                for (x1, x2), value in zip(features.grid_input, values[:, node]):
                    writer.writerow([layer, node, format_float(x1), format_float(x2), format_float(value)])
