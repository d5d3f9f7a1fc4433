"""
Сводка нескольких запусков с разными master seed.

Каждый запуск даёт средний DSC по вариантам отчёта; здесь они сводятся
в таблицу seed × вариант с медианой и проверяются ожидаемые тренды:
разрыв доменов закрывается трансляцией, самообучение не ухудшает
результат, ResNet-генератор не хуже U-net. Нарушение тренда только
предупреждение.
"""

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import PreconditionError
from .metrics import MetricsReport

logger = logging.getLogger(__name__)

RAW_SOURCE_KEY = 'raw-source'
RAW_SOURCE_MAX_DSC = 0.50
ADAPTED_MIN_DSC = 0.60
SELF_TRAINING_GAIN = 0.01
SELF_TRAINING_TOLERANCE = 0.02


def iteration_key(generator: str, iteration: int) -> str:
    return f'{generator}-iter{iteration}'


@dataclass(frozen=True)
class SeedResult:
    """Средний DSC каждого варианта одного запуска"""
    seed: int
    names: Dict[str, str]
    mean_dsc: Dict[str, float]

    @classmethod
    def from_reports(cls, seed: int, rows: Sequence[Tuple[str, str, MetricsReport]]) -> 'SeedResult':
        return cls(
            seed=seed,
            names={key: name for key, name, _ in rows},
            mean_dsc={key: report.mean_dsc.mean for key, _, report in rows},
        )


@dataclass(frozen=True)
class TrendCheck:
    title: str
    detail: str
    holds: bool

    @property
    def line(self) -> str:
        return f'{self.title}: {self.detail}: {"holds" if self.holds else "WARNING, violated"}'


def _seed_phrase(results: Sequence[SeedResult]) -> str:
    return 'mean DSC' if len(results) == 1 else f'median mean DSC over {len(results)} seeds'


def median_dsc(results: Sequence[SeedResult], key: str) -> Optional[float]:
    """Медиана по сидам; None, если вариант есть не во всех запусках"""
    if not results or any(key not in result.mean_dsc for result in results):
        return None
    return float(np.median([result.mean_dsc[key] for result in results]))


def domain_gap_check(results: Sequence[SeedResult], generator: str) -> Optional[TrendCheck]:
    adapted = iteration_key(generator, 0)
    usable = [r for r in results if RAW_SOURCE_KEY in r.mean_dsc and adapted in r.mean_dsc]
    if len(usable) != len(results) or not results:
        return None
    needed = math.ceil(2 * len(results) / 3)
    passing = [r.seed for r in results
               if r.mean_dsc[RAW_SOURCE_KEY] <= RAW_SOURCE_MAX_DSC and r.mean_dsc[adapted] >= ADAPTED_MIN_DSC]
    name = results[0].names[adapted]
    title = (f'Domain gap check (raw source <= {RAW_SOURCE_MAX_DSC:.2f} and {name} >= '
             f'{ADAPTED_MIN_DSC:.2f}, mean DSC, in at least {needed} of {len(results)} seeds)')
    seeds = ', '.join(str(seed) for seed in passing) or 'none'
    return TrendCheck(title, f'{len(passing)} of {len(results)} seeds ({seeds})', len(passing) >= needed)


def self_training_check(results: Sequence[SeedResult], generator: str) -> Optional[TrendCheck]:
    medians = []
    value = median_dsc(results, iteration_key(generator, 0))
    while value is not None:
        medians.append(value)
        value = median_dsc(results, iteration_key(generator, len(medians)))
    if len(medians) < 2:
        return None
    last = len(medians) - 1
    lowest = int(np.argmin(medians))
    holds = (medians[last] >= medians[0] + SELF_TRAINING_GAIN
             and medians[lowest] >= medians[0] - SELF_TRAINING_TOLERANCE)
    title = (f'Self-training check (iter{last} >= iter0 + {SELF_TRAINING_GAIN:.2f}, no iteration below '
             f'iter0 - {SELF_TRAINING_TOLERANCE:.2f}, {_seed_phrase(results)})')
    detail = (f'iter{last} {medians[last]:.4f} vs iter0 {medians[0]:.4f}, '
              f'lowest iter{lowest} {medians[lowest]:.4f}')
    return TrendCheck(title, detail, holds)


def generator_check(results: Sequence[SeedResult]) -> Optional[TrendCheck]:
    """ResNet >= U-net без самообучения"""
    resnet = median_dsc(results, iteration_key('resnet', 0))
    unet = median_dsc(results, iteration_key('unet', 0))
    if resnet is None or unet is None:
        return None
    title = f'Generator check (ResNet >= U-net w/o ST, {_seed_phrase(results)})'
    return TrendCheck(title, f'{resnet:.4f} vs {unet:.4f}', resnet >= unet)


def trend_checks(results: Sequence[SeedResult], generator: str) -> List[TrendCheck]:
    checks = [domain_gap_check(results, generator), self_training_check(results, generator),
              generator_check(results)]
    checks = [check for check in checks if check is not None]
    for check in checks:
        if not check.holds:
            logger.warning(check.line)
    return checks


def _variant_order(results: Sequence[SeedResult]) -> List[Tuple[str, str]]:
    order = {}
    for result in results:
        for key, name in result.names.items():
            order.setdefault(key, name)
    return list(order.items())


def summary_rows(results: Sequence[SeedResult]) -> Tuple[List[str], List[List[str]]]:
    """Заголовок и строки: вариант, средний DSC по каждому сиду, медиана"""
    if not results:
        raise PreconditionError('seed summary needs at least one run')
    header = ['Method'] + [f'seed {r.seed}' for r in results] + ['median']
    rows = []
    for key, name in _variant_order(results):
        cells = [f'{r.mean_dsc[key]:.4f}' if key in r.mean_dsc else '-' for r in results]
        median = median_dsc(results, key)
        rows.append([name] + cells + [f'{median:.4f}' if median is not None else '-'])
    return header, rows


def render_summary(results: Sequence[SeedResult], checks: Sequence[TrendCheck]) -> str:
    header, rows = summary_rows(results)
    widths = [max(len(line[i]) for line in [header] + rows) for i in range(len(header))]

    def fmt(line):
        return '  '.join(cell.ljust(width) for cell, width in zip(line, widths)).rstrip()

    lines = [fmt(header), '-' * len(fmt(header))] + [fmt(row) for row in rows]
    if checks:
        lines.append('')
        lines += [check.line for check in checks]
    return '\n'.join(lines) + '\n'


def write_summary_csv(path: Path, results: Sequence[SeedResult]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header, rows = summary_rows(results)
    with open(path, 'w', encoding='utf-8', newline='') as fh:
        writer = csv.writer(fh, lineterminator='\n')
        writer.writerow(header)
        writer.writerows(rows)
    return path
