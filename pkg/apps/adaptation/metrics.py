"""
Метрики сегментации: DSC и ASSD по структурам, агрегирование mean ± std
и табличный отчёт в формате сравнения вариантов пайплайна.

Поверхность структуры: воксели маски, у которых хотя бы один из шести
соседей фон или лежит за границей сетки. Расстояния считаются между
центрами вокселей в физических координатах (индекс · шаг).
"""

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.ndimage import binary_erosion, generate_binary_structure
from scipy.spatial import cKDTree

from .exceptions import DimensionMismatchError, MissingInputError, PreconditionError
from .volumes import DatasetManifest, LabelVolume, Volume3D, load_labels, load_volume

logger = logging.getLogger(__name__)

FOREGROUND = (1, 2)
CLASS_NAMES = {1: 'VS', 2: 'Cochlea'}

EMPTY_PREDICTION = 'empty_prediction'
EMPTY_REFERENCE = 'empty_reference'
BOTH_EMPTY = 'both_empty'

_SIX_NEIGHBOURS = generate_binary_structure(3, 1)

LabelInput = Union[LabelVolume, np.ndarray]


def _label_array(volume: LabelInput) -> np.ndarray:
    return volume.labels if isinstance(volume, LabelVolume) else np.asarray(volume)


def _class_masks(pred: LabelInput, ref: LabelInput, cls: int) -> Tuple[np.ndarray, np.ndarray]:
    pred_labels, ref_labels = _label_array(pred), _label_array(ref)
    if pred_labels.shape != ref_labels.shape:
        raise DimensionMismatchError(
            f'prediction {pred_labels.shape} and reference {ref_labels.shape} differ in dims'
        )
    return pred_labels == cls, ref_labels == cls


def emptiness_flag(pred_mask: np.ndarray, ref_mask: np.ndarray) -> Optional[str]:
    pred_empty, ref_empty = not pred_mask.any(), not ref_mask.any()
    if pred_empty and ref_empty:
        return BOTH_EMPTY
    if pred_empty:
        return EMPTY_PREDICTION
    if ref_empty:
        return EMPTY_REFERENCE
    return None


def dsc_with_flag(pred: LabelInput, ref: LabelInput, cls: int) -> Tuple[float, Optional[str]]:
    pred_mask, ref_mask = _class_masks(pred, ref, cls)
    flag = emptiness_flag(pred_mask, ref_mask)
    if flag == BOTH_EMPTY:
        return 1.0, flag
    intersection = int(np.count_nonzero(pred_mask & ref_mask))
    total = int(np.count_nonzero(pred_mask)) + int(np.count_nonzero(ref_mask))
    return 2.0 * intersection / total, flag


def dsc(pred: LabelInput, ref: LabelInput, cls: int) -> float:
    """2|A∩B| / (|A|+|B|); обе маски пустые -> 1.0"""
    return dsc_with_flag(pred, ref, cls)[0]


def extract_surface(mask: np.ndarray) -> np.ndarray:
    """Индексы (n, 3) граничных вокселей маски в лексикографическом порядке"""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.zeros((0, mask.ndim), dtype=np.int64)
    interior = binary_erosion(mask, structure=_SIX_NEIGHBOURS, border_value=0)
    return np.argwhere(mask & ~interior)


def diagonal_penalty(shape: Sequence[int], spacing: Sequence[float]) -> float:
    """Физическая диагональ сетки, мм"""
    return math.sqrt(sum((n * s) ** 2 for n, s in zip(shape, spacing)))


def _resolve_spacing(pred: LabelInput, ref: LabelInput, spacing) -> Tuple[float, ...]:
    if isinstance(pred, LabelVolume) and isinstance(ref, LabelVolume) and pred.spacing != ref.spacing:
        raise DimensionMismatchError(f'spacing differs: {pred.spacing} vs {ref.spacing}')
    if spacing is None:
        if not isinstance(pred, LabelVolume):
            raise PreconditionError('spacing is required for raw label arrays')
        spacing = pred.spacing
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or not all(s > 0 and math.isfinite(s) for s in spacing):
        raise PreconditionError(f'spacing must be three positive numbers, got {spacing}')
    return spacing


def _mean_directed(points: np.ndarray, tree: cKDTree) -> float:
    distances, _ = tree.query(points, k=1)
    return float(np.mean(distances))


def assd_with_flag(pred: LabelInput, ref: LabelInput, spacing=None, cls: int = 1,
                   penalty: Optional[float] = None) -> Tuple[float, Optional[str]]:
    """
    Среднее симметричное расстояние между поверхностями, мм.

    Ровно одна поверхность пустая -> penalty (по умолчанию диагональ
    сетки) с флагом; обе пустые -> 0.0 с флагом both_empty.
    """
    pred_mask, ref_mask = _class_masks(pred, ref, cls)
    spacing = _resolve_spacing(pred, ref, spacing)
    flag = emptiness_flag(pred_mask, ref_mask)
    if flag == BOTH_EMPTY:
        return 0.0, flag
    if flag is not None:
        if penalty is None:
            penalty = diagonal_penalty(pred_mask.shape, spacing)
        return float(penalty), flag

    scale = np.asarray(spacing, dtype=np.float64)
    pred_points = extract_surface(pred_mask) * scale
    ref_points = extract_surface(ref_mask) * scale
    forward = _mean_directed(pred_points, cKDTree(ref_points))
    backward = _mean_directed(ref_points, cKDTree(pred_points))
    return 0.5 * (forward + backward), None


def assd(pred: LabelInput, ref: LabelInput, spacing=None, cls: int = 1,
         penalty: Optional[float] = None) -> float:
    return assd_with_flag(pred, ref, spacing, cls, penalty)[0]


# --------------------------------------------------------------------------
# Метрики кейса и агрегирование
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CaseMetrics:
    case_id: str
    dsc: Dict[int, float]
    assd: Dict[int, float]
    flags: Dict[int, Optional[str]] = field(default_factory=dict)

    @property
    def mean_dsc(self) -> float:
        return float(np.mean([self.dsc[c] for c in sorted(self.dsc)]))


def evaluate_case(case_id: str, pred: LabelVolume, ref: LabelVolume, penalty: Optional[float] = None,
                  classes: Sequence[int] = FOREGROUND) -> CaseMetrics:
    dsc_values, assd_values, flags = {}, {}, {}
    for cls in classes:
        dsc_values[cls], flags[cls] = dsc_with_flag(pred, ref, cls)
        assd_values[cls], _ = assd_with_flag(pred, ref, None, cls, penalty)
    return CaseMetrics(case_id, dsc_values, assd_values, flags)


def format_stat(mean: float, std: float) -> str:
    return f'{mean:.4f} ± {std:.4f}'


@dataclass(frozen=True)
class Stat:
    mean: float
    std: float

    @classmethod
    def of(cls, values: Sequence[float]) -> 'Stat':
        values = np.asarray(values, dtype=np.float64)
        # стандартное отклонение по генеральной совокупности
        return cls(float(values.mean()), float(values.std(ddof=0)))

    def __str__(self):
        return format_stat(self.mean, self.std)


@dataclass(frozen=True)
class MetricsReport:
    cases: Tuple[CaseMetrics, ...]
    classes: Tuple[int, ...]
    mean_dsc: Stat
    dsc: Dict[int, Stat]
    assd: Dict[int, Stat]

    @property
    def n_cases(self) -> int:
        return len(self.cases)

    @property
    def flagged(self) -> int:
        return sum(1 for case in self.cases for flag in case.flags.values() if flag)

    def row(self) -> List[str]:
        """Ячейки строки таблицы: DSC Mean, DSC по классам, ASSD по классам"""
        return ([str(self.mean_dsc)] + [str(self.dsc[c]) for c in self.classes]
                + [str(self.assd[c]) for c in self.classes])


def aggregate_report(cases: Sequence[CaseMetrics]) -> MetricsReport:
    if not cases:
        raise PreconditionError('cannot aggregate an empty list of case metrics')
    classes = tuple(sorted(cases[0].dsc))
    for case in cases:
        if tuple(sorted(case.dsc)) != classes or tuple(sorted(case.assd)) != classes:
            raise PreconditionError(f'case {case.case_id} does not report classes {classes}')
    return MetricsReport(
        cases=tuple(cases),
        classes=classes,
        mean_dsc=Stat.of([case.mean_dsc for case in cases]),
        dsc={c: Stat.of([case.dsc[c] for case in cases]) for c in classes},
        assd={c: Stat.of([case.assd[c] for case in cases]) for c in classes},
    )


def report_header(classes: Sequence[int] = FOREGROUND) -> List[str]:
    names = [CLASS_NAMES.get(c, f'class {c}') for c in classes]
    return (['Method', 'DSC Mean'] + [f'DSC {n}' for n in names]
            + [f'ASSD {n} (mm)' for n in names])


def render_table(rows: Sequence[Tuple[str, MetricsReport]]) -> str:
    """Выровненная текстовая таблица; DSC в долях, не в процентах"""
    if not rows:
        raise PreconditionError('report has no rows')
    header = report_header(rows[0][1].classes)
    body = [[name] + report.row() for name, report in rows]
    widths = [max(len(line[i]) for line in [header] + body) for i in range(len(header))]

    def fmt(line):
        return '  '.join(cell.ljust(width) for cell, width in zip(line, widths)).rstrip()

    ruler = '-' * len(fmt(header))
    return '\n'.join([fmt(header), ruler] + [fmt(line) for line in body]) + '\n'


def write_report_csv(path: Path, rows: Sequence[Tuple[str, MetricsReport]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='') as fh:
        writer = csv.writer(fh, lineterminator='\n')
        writer.writerow(report_header(rows[0][1].classes if rows else FOREGROUND) + ['cases'])
        for name, report in rows:
            writer.writerow([name] + report.row() + [report.n_cases])
    return path


def write_case_metrics(path: Path, cases: Sequence[CaseMetrics]) -> Path:
    """Сырые значения по кейсам; отчёт агрегирует только их, не пересчитывая метрики"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    classes = tuple(sorted(cases[0].dsc)) if cases else FOREGROUND
    with open(path, 'w', encoding='utf-8', newline='') as fh:
        writer = csv.writer(fh, lineterminator='\n')
        writer.writerow(['case_id'] + [f'dsc_{c}' for c in classes] + [f'assd_{c}' for c in classes]
                        + [f'flag_{c}' for c in classes])
        for case in cases:
            writer.writerow(
                [case.case_id] + [repr(case.dsc[c]) for c in classes]
                + [repr(case.assd[c]) for c in classes]
                + [case.flags.get(c) or '' for c in classes]
            )
    return path


def read_case_metrics(path: Path) -> List[CaseMetrics]:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f'no stored case metrics at {path}')
    with open(path, 'r', encoding='utf-8', newline='') as fh:
        reader = csv.DictReader(fh)
        classes = sorted(int(name[4:]) for name in reader.fieldnames or [] if name.startswith('dsc_'))
        cases = []
        for row in reader:
            cases.append(CaseMetrics(
                case_id=row['case_id'],
                dsc={c: float(row[f'dsc_{c}']) for c in classes},
                assd={c: float(row[f'assd_{c}']) for c in classes},
                flags={c: row[f'flag_{c}'] or None for c in classes},
            ))
    return cases


# --------------------------------------------------------------------------
# Оценочный набор
# --------------------------------------------------------------------------

class EvalSet:
    """
    Размеченные target-кейсы оценочной выборки.

    Единственное место пайплайна, которое читает эталонные метки target
    из карантинного каталога.
    """

    def __init__(self, manifest: DatasetManifest, penalty: Optional[float] = None, threads: int = 1):
        self.manifest = manifest
        self.entries = manifest.select('target', 'eval')
        self.penalty = penalty
        self.threads = max(1, int(threads))
        if not self.entries:
            raise PreconditionError(f'no target eval cases listed in {manifest.root}')

    @classmethod
    def from_quarantine(cls, manifest_path: Path, penalty: Optional[float] = None,
                        threads: int = 1) -> 'EvalSet':
        manifest_path = Path(manifest_path)
        if not manifest_path.exists():
            raise MissingInputError(f'no quarantine manifest at {manifest_path}')
        return cls(DatasetManifest.read(manifest_path), penalty, threads)

    def __len__(self):
        return len(self.entries)

    @property
    def case_ids(self) -> List[str]:
        return [entry.case_id for entry in self.entries]

    def evaluate(self, predict_fn: Callable[[Volume3D], LabelVolume],
                 on_prediction: Optional[Callable[[str, LabelVolume], None]] = None) -> MetricsReport:
        def run(entry):
            prediction = predict_fn(load_volume(self.manifest.image_path(entry)))
            reference = load_labels(self.manifest.label_path(entry))
            if prediction.shape != reference.shape:
                raise DimensionMismatchError(
                    f'{entry.case_id}: prediction {prediction.shape} vs reference {reference.shape}'
                )
            if on_prediction is not None:
                on_prediction(entry.case_id, prediction)
            return evaluate_case(entry.case_id, prediction, reference, self.penalty)

        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            cases = list(pool.map(run, self.entries))
        report = aggregate_report(cases)
        logger.info('Evaluated %d cases: mean DSC %s', report.n_cases, report.mean_dsc)
        return report
