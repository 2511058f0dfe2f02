"""ResidualDroppath 玩具实验：螺旋数据、训练、特征可视化、多 seed 对比。

Usage:
  cli.py dataset [--n=<n>] [--seed=<seed>] [--out=<path>] [--svg=<path>] [-q | -v]
  cli.py train [--config=<file>] [--algorithm=<name>] [--depth=<n>] [--hidden=<n>]
               [--epochs=<n>] [--batch=<n>] [--lr=<lr>] [--betas=<b1,b2>] [--eps=<eps>]
               [--drop-rate=<p>] [--seed=<seed>] [--mask-reuse=<mode>] [--n=<n>]
               [--data-seed=<seed>] [--eval-fraction=<f>] [--checkpoint-epochs=<list>]
               [--out=<dir>] [-q | -v]
  cli.py visualize --checkpoint=<file> --kind=<kind> [--layers=<list>] [--nodes=<list>]
                   [--resolution=<n>] [--data=<csv>] [--out=<dir>] [-q | -v]
  cli.py snapshots --run=<dir> --epochs=<list> [--layers=<list>] [--nodes=<list>]
                   [--resolution=<n>] [--data=<csv>] [--out=<dir>] [-q | -v]
  cli.py compare --seeds=<list> [--config=<file>] [--algorithm=<name>] [--depth=<n>]
                 [--hidden=<n>] [--epochs=<n>] [--batch=<n>] [--lr=<lr>] [--betas=<b1,b2>]
                 [--eps=<eps>] [--drop-rate=<p>] [--mask-reuse=<mode>] [--n=<n>]
                 [--data-seed=<seed>] [--eval-fraction=<f>] [--out=<dir>] [-q | -v]
  cli.py (-h | --help)

Options:
  -h --help      显示帮助
  -q --quiet     只输出警告和错误，不显示进度条
  -v --verbose   输出调试日志

Exit codes: 0 成功, 2 参数/文件错误, 3 训练发散, 4 对比实验部分失败.
"""
import logging
import os
import sys

from docopt import DocoptExit, docopt
from termcolor import colored

import log_setup
from analysis import (default_panel_spec, layer_similarity, PanelSpec, render_dataset_scatter,
                      render_feature_panel, render_similarity_heatmap, snapshot_training,
                      validate_svg, write_feature_csv, write_similarity_csv)
from checkpoint import load, load_snapshots
from config import FLAGS, harness_threads, load_run_config, parse_int_list
from dataset import (SpiralParams, format_float, generate_grid, generate_spiral, read_csv, split_eval,
                     write_csv)
from errors import HarnessError, RdpError, ValidationError
from model import extract_features
from runner import CompareHarness, format_table, run_training, write_compare_csv, write_runs_csv

logger = logging.getLogger('cli')

TRAIN_FLAGS = [flag for flag in FLAGS if flag not in ('layers', 'nodes', 'resolution')]
VISUALIZE_KINDS = ('panel', 'similarity')


# 写入文本文件
def write_to_text_file(file_path, content):
    parent = os.path.dirname(file_path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(file_path, 'w', encoding='utf-8') as file:
        file.write(content)


def _write_svg(file_path, document):
    validate_svg(document)
    write_to_text_file(file_path, document)


def _parse(args, flag, convert, default=None):
    raw = args.get(flag)
    if raw is None:
        return default
    try:
        return convert(raw)
    except ValueError as e:
        raise ValidationError(f'{flag}: invalid value {raw!r}') from e


def _overrides(args, flags):
    return {flag: args.get(f'--{flag}') for flag in flags}


def _panel_spec(args, model, resolution):
    spec = default_panel_spec(model.depth, model.hidden, resolution=resolution)
    layers = _parse(args, '--layers', parse_int_list)
    nodes = _parse(args, '--nodes', parse_int_list)
    return PanelSpec(tuple(layers) if layers is not None else spec.layers,
                     tuple(nodes) if nodes is not None else spec.nodes, resolution)


def _training_points(args, echo):
    if args.get('--data'):
        return read_csv(args['--data'])
    if 'n' in echo and 'data-seed' in echo:
        data_seed = int(echo['data-seed'])
        data = generate_spiral(SpiralParams(int(echo['n']), data_seed))
        # 只画训练部分，留出的 eval 点不算
        train_points, _ = split_eval(data, float(echo.get('eval-fraction', 0.0)), data_seed)
        return train_points
    return None


def cmd_dataset(args, verbosity):
    n = _parse(args, '--n', int, 16384)
    seed = _parse(args, '--seed', int, 0)
    out = args.get('--out') or 'spiral.csv'
    data = generate_spiral(SpiralParams(n, seed))
    parent = os.path.dirname(out)
    if parent:
        os.makedirs(parent, exist_ok=True)
    write_csv(data, out)
    if args.get('--svg'):
        _write_svg(args['--svg'], render_dataset_scatter(data))
    logger.info('螺旋数据已写入 %s (%d 个点)', out, len(data))
    return 0


def cmd_train(args, verbosity):
    config = load_run_config(args.get('--config'), _overrides(args, TRAIN_FLAGS))
    result = run_training(config, config.out_dir, progress=log_setup.progress_enabled(verbosity))
    print(f'final_train_acc={format_float(result.final_train_acc)}')
    return 0


def cmd_visualize(args, verbosity):
    kind = args.get('--kind')
    if kind not in VISUALIZE_KINDS:
        raise ValidationError(f'--kind must be one of {", ".join(VISUALIZE_KINDS)}, got {kind!r}')
    checkpoint = load(args['--checkpoint'])
    model = checkpoint.model
    out_dir = args.get('--out') or '.'
    os.makedirs(out_dir, exist_ok=True)
    resolution = _parse(args, '--resolution', int, 50)
    grid = generate_grid(resolution)

    if kind == 'similarity':
        matrix = layer_similarity(extract_features(model, grid))
        write_similarity_csv(matrix, os.path.join(out_dir, 'similarity'))
        _write_svg(os.path.join(out_dir, 'similarity.svg'), render_similarity_heatmap(matrix))
    else:
        spec = _panel_spec(args, model, resolution)
        points = _training_points(args, checkpoint.config)
        _write_svg(os.path.join(out_dir, 'panel.svg'), render_feature_panel(model, grid, points, spec))
        write_feature_csv(extract_features(model, grid), os.path.join(out_dir, 'features.csv'),
                          layers=spec.layers, nodes=spec.nodes)
    logger.info('%s 可视化已写入 %s', kind, out_dir)
    return 0


def cmd_snapshots(args, verbosity):
    run_dir = args['--run']
    epochs = _parse(args, '--epochs', parse_int_list)
    if not epochs:
        raise ValidationError('--epochs needs at least one epoch')
    checkpoints = load_snapshots(run_dir, epochs)
    first = checkpoints[epochs[0]]
    resolution = _parse(args, '--resolution', int, 50)
    spec = _panel_spec(args, first.model, resolution)
    points = _training_points(args, first.config)
    panels = snapshot_training({epoch: ckpt.model for epoch, ckpt in checkpoints.items()}, epochs,
                               generate_grid(resolution), spec, points)
    out_dir = args.get('--out') or run_dir
    for epoch, document in panels.items():
        _write_svg(os.path.join(out_dir, f'panel_epoch_{epoch}.svg'), document)
    logger.info('已生成 %d 张训练过程特征图', len(panels))
    return 0


def cmd_compare(args, verbosity):
    config = load_run_config(args.get('--config'), _overrides(args, TRAIN_FLAGS))
    seeds = _parse(args, '--seeds', parse_int_list)
    if not seeds:
        raise ValidationError('--seeds needs at least one seed')
    harness = CompareHarness(config, seeds, config.out_dir, harness_threads())
    results, rows = harness.run()
    os.makedirs(config.out_dir, exist_ok=True)
    write_compare_csv(rows, os.path.join(config.out_dir, 'compare.csv'))
    write_runs_csv(results, os.path.join(config.out_dir, 'runs.csv'))
    print(format_table(rows))
    failed = sum(row.failed for row in rows)
    if failed:
        raise HarnessError(f'{failed} of {len(results)} runs failed')
    return 0


COMMANDS = {
    'dataset': cmd_dataset,
    'train': cmd_train,
    'visualize': cmd_visualize,
    'snapshots': cmd_snapshots,
    'compare': cmd_compare,
}


def main(argv=None):
    try:
        args = docopt(__doc__, argv=argv)
    except DocoptExit as e:
        print(e, file=sys.stderr)
        return 2

    if args['--quiet']:
        verbosity = log_setup.QUIET
    elif args['--verbose']:
        verbosity = log_setup.VERBOSE
    else:
        verbosity = log_setup.NORMAL
    log_setup.configure(verbosity)

    command = next(name for name in COMMANDS if args.get(name))
    try:
        return COMMANDS[command](args, verbosity)
    except RdpError as e:
        print(colored(f'error: {e}', 'red'), file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(colored(f'error: {e}', 'red'), file=sys.stderr)
        return 2


if __name__ == '__main__':
    sys.exit(main())
