"""
Итеративное самообучение на псевдометках.

Итерация 0 обучает сегментатор только на псевдо-target кейсах с настоящими
метками. На итерации k >= 1 модель k−1 размечает реальные target-объёмы,
и новая модель обучается на объединении двух наборов с равными весами.
Сиды итераций: derive_seed(seed, 'self_training', k).
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from .exceptions import PreconditionError
from .metrics import EvalSet, MetricsReport
from .networks import ParamsModule
from .optim import OptimState
from .reproducibility import derive_seed
from .segmentation import SegTrainConfig, predict, train_segmenter
from .volumes import LabelVolume, Volume3D

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SelfTrainConfig:
    n_iters: int = 3
    segmentation: SegTrainConfig = field(default_factory=SegTrainConfig)
    retrain_from_scratch: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_iters < 0:
            raise PreconditionError('n_iters must be >= 0')

    def iteration_config(self, k: int) -> SegTrainConfig:
        return replace(self.segmentation, seed=derive_seed(self.seed, 'self_training', k))


@dataclass
class IterationRecord:
    """Результат одной итерации: модель, история потерь и её псевдометки"""
    iteration: int
    model: ParamsModule
    history: List[float]
    optim_state: Optional[OptimState]
    n_train: int
    pseudo_labels: Dict[str, LabelVolume] = field(default_factory=dict)
    report: Optional[MetricsReport] = None


@dataclass
class SelfTrainState:
    n_iters: int
    k: int = -1
    model: Optional[ParamsModule] = None
    pseudo_label_sets: Dict[int, Dict[str, LabelVolume]] = field(default_factory=dict)
    reports: List[MetricsReport] = field(default_factory=list)

    def advance(self, record: IterationRecord):
        if record.iteration != self.k + 1 or record.iteration > self.n_iters:
            raise PreconditionError(
                f'iteration {record.iteration} cannot follow {self.k} with n_iters={self.n_iters}'
            )
        if (record.iteration >= 1) != bool(record.pseudo_labels):
            raise PreconditionError('pseudo labels exist exactly for iterations 1..k')
        self.k = record.iteration
        self.model = record.model
        if record.pseudo_labels:
            self.pseudo_label_sets[record.iteration] = record.pseudo_labels
        if record.report is not None:
            self.reports.append(record.report)


@dataclass
class SelfTrainResult:
    model: ParamsModule
    reports: List[MetricsReport]
    state: SelfTrainState
    records: List[IterationRecord]


def generate_pseudo_labels(model: ParamsModule, volumes: Sequence[Volume3D],
                           threads: int = 1) -> List[LabelVolume]:
    """predict по каждому объёму; без фильтрации по уверенности"""
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        return list(pool.map(lambda vol: predict(vol, model), volumes))


def run_self_training(pseudo_target_cases: Sequence[Tuple[Volume3D, LabelVolume]],
                      real_target_vols: Dict[str, Volume3D],
                      eval_set: Optional[EvalSet],
                      cfg: SelfTrainConfig,
                      on_iteration: Optional[Callable[[IterationRecord], None]] = None,
                      threads: int = 1) -> SelfTrainResult:
    """
    Возвращает финальную модель и 1 + n_iters отчётов (если задан eval_set).

    real_target_vols: реальные target-объёмы без меток по case_id.
    on_iteration вызывается после каждой итерации, до начала следующей.
    """
    if not pseudo_target_cases:
        raise PreconditionError('self-training needs at least one pseudo-target case')
    if cfg.n_iters > 0 and not real_target_vols:
        raise PreconditionError('self-training iterations need real target volumes')

    state = SelfTrainState(n_iters=cfg.n_iters)
    records = []
    case_ids = list(real_target_vols)
    target_vols = [real_target_vols[case_id] for case_id in case_ids]

    for k in range(cfg.n_iters + 1):
        pseudo_labels = {}
        training_set = list(pseudo_target_cases)
        if k >= 1:
            labels = generate_pseudo_labels(state.model, target_vols, threads)
            pseudo_labels = dict(zip(case_ids, labels))
            training_set += list(zip(target_vols, labels))

        init_model = init_state = None
        if k >= 1 and not cfg.retrain_from_scratch:
            init_model, init_state = state.model, records[-1].optim_state
        logger.info('Self-training iteration %d/%d on %d cases', k, cfg.n_iters, len(training_set))
        trained = train_segmenter(training_set, cfg.iteration_config(k), init_model, init_state)

        report = None
        if eval_set is not None:
            report = eval_set.evaluate(lambda vol: predict(vol, trained.model))
        record = IterationRecord(
            iteration=k, model=trained.model, history=trained.history,
            optim_state=trained.optim_state, n_train=len(training_set),
            pseudo_labels=pseudo_labels, report=report,
        )
        state.advance(record)
        records.append(record)
        if on_iteration is not None:
            on_iteration(record)

    return SelfTrainResult(model=state.model, reports=state.reports, state=state, records=records)
