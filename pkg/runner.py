import csv
import logging
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from checkpoint import Checkpoint, epoch_path, save
from dataset import SpiralParams, format_float, generate_spiral, split_eval
from errors import DivergenceError, RdpError
from training import Algorithm, evaluate, train

logger = logging.getLogger(__name__)

MODEL_FILE = 'model.ckpt'
METRICS_FILE = 'metrics.csv'
EPOCHS_FILE = 'epochs.csv'


@dataclass
class RunResult:
    model: object
    metrics: object
    final_train_acc: float


def load_training_data(config):
    data = generate_spiral(SpiralParams(config.n_samples, config.data_seed))
    return split_eval(data, config.eval_fraction, config.data_seed)


def run_training(config, out_dir, progress=False):
    os.makedirs(out_dir, exist_ok=True)
    train_data, eval_data = load_training_data(config)
    echo = config.to_dict()
    seed = config.train.seed

    def on_epoch_end(epoch, model):
        if epoch in config.checkpoint_epochs:
            save(Checkpoint(model, epoch, seed, echo), epoch_path(out_dir, epoch))

    try:
        model, metrics = train(config.train, train_data, eval_data, on_epoch_end, progress)
    except DivergenceError as e:
        # 发散时先把已有的 metrics 写出去
        if e.metrics is not None:
            e.metrics.write_csv(os.path.join(out_dir, METRICS_FILE))
            e.metrics.write_epochs_csv(os.path.join(out_dir, EPOCHS_FILE))
        raise

    metrics.write_csv(os.path.join(out_dir, METRICS_FILE))
    metrics.write_epochs_csv(os.path.join(out_dir, EPOCHS_FILE))
    # 训练被 stop() 提前结束时记录实际到达的 epoch
    reached = metrics.epochs[-1].epoch if metrics.epochs else 0
    save(Checkpoint(model, reached, seed, echo), os.path.join(out_dir, MODEL_FILE))
    final_acc = metrics.final_train_acc
    if final_acc is None:
        final_acc = evaluate(model, train_data)
    logger.info('结果保存至: %s', out_dir)
    return RunResult(model, metrics, final_acc)


@dataclass
class CellResult:
    algorithm: Algorithm
    seed: int
    status: str
    final_train_acc: float = None
    message: str = ''


@dataclass
class SummaryRow:
    algorithm: Algorithm
    runs: int
    failed: int
    mean: float
    std: float


class CompareHarness:
    """每个 (algorithm, seed) 一个独立的训练任务，结果按 (algorithm, seed) 排序汇总。"""

    algorithms = (Algorithm.STANDARD, Algorithm.DROPPATH, Algorithm.RESIDUAL_DROPPATH)

    def __init__(self, config, seeds, out_dir, threads=1):
        self.config = config
        self.seeds = list(seeds)
        self.out_dir = out_dir
        self.threads = threads
        self._is_running = True
        self._done = 0
        self._lock = threading.Lock()

    def cells(self):
        return [(algorithm, seed) for algorithm in self.algorithms for seed in self.seeds]

    def run(self):
        cells = self.cells()
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            futures = [pool.submit(self._run_cell, algorithm, seed, len(cells)) for algorithm, seed in cells]
            try:
                results = [future.result() for future in futures]
            except KeyboardInterrupt:
                # 还没开始的格子直接跳过
                self.stop()
                raise
        return results, summarize(results, self.algorithms)

    def stop(self):
        self._is_running = False

    def _run_cell(self, algorithm, seed, total):
        if not self._is_running:
            return CellResult(algorithm, seed, 'skipped')
        config = self.config.with_train(algorithm=algorithm, seed=seed)
        cell_dir = os.path.join(self.out_dir, f'{algorithm.value}_seed{seed}')
        try:
            result = run_training(config, cell_dir)
            cell = CellResult(algorithm, seed, 'ok', result.final_train_acc)
        except RdpError as e:
            logger.error('%s seed=%d 失败: %s', algorithm.value, seed, e)
            cell = CellResult(algorithm, seed, 'failed', message=str(e))
        except Exception as e:
            logger.exception('%s seed=%d 异常中止', algorithm.value, seed)
            cell = CellResult(algorithm, seed, 'failed', message=str(e))
        self._update_progress(total)
        return cell

    def _update_progress(self, total):
        with self._lock:
            self._done += 1
            done = self._done
        logger.info('对比实验进度 %d/%d', done, total)


def summarize(results, algorithms):
    rows = []
    for algorithm in algorithms:
        cells = [r for r in results if r.algorithm is algorithm]
        accs = [r.final_train_acc for r in cells if r.status == 'ok']
        failed = sum(1 for r in cells if r.status != 'ok')
        if accs:
            mean = float(np.mean(accs))
            std = float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0
        else:
            mean = std = float('nan')
        rows.append(SummaryRow(algorithm, len(cells), failed, mean, std))
    return rows


def write_compare_csv(rows, file_path):
    with open(file_path, 'w', encoding='utf-8', newline='') as file:
        writer = csv.writer(file, lineterminator='\n')
        writer.writerow(['algorithm', 'runs', 'failed', 'mean', 'std'])
        for row in rows:
            writer.writerow([row.algorithm.value, row.runs, row.failed, format_float(row.mean), format_float(row.std)])


def write_runs_csv(results, file_path):
    with open(file_path, 'w', encoding='utf-8', newline='') as file:
        writer = csv.writer(file, lineterminator='\n')
        writer.writerow(['algorithm', 'seed', 'status', 'final_train_acc'])
        for r in results:
            writer.writerow([r.algorithm.value, r.seed, r.status,
                             '' if r.final_train_acc is None else format_float(r.final_train_acc)])


def format_table(rows):
    # 百分比，mean ± std
    width = max(len('Algorithm'), *(len(row.algorithm.value) for row in rows))
    lines = [f'{"Algorithm":<{width}}  {"Top-1 (%)":>16}  Failed']
    for row in rows:
        if np.isnan(row.mean):
            cell = 'failed'
        else:
            cell = f'{row.mean * 100:.2f} ± {row.std * 100:.2f}'
        lines.append(f'{row.algorithm.value:<{width}}  {cell:>16}  {row.failed}/{row.runs}')
    return '\n'.join(lines)
