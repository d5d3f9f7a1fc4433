"""
Стадии пайплайна поверх каталога запуска.

Стадии обмениваются только файлами. Каталог каждой стадии содержит маркер
`.complete` с дайджестом конфигурации, от которой стадия зависит; повторный
запуск с тем же дайджестом без --force ничего не делает.

Раскладка каталога запуска:
    config.json                       канонический снимок конфигурации
    data/                             изображения, метки source, manifest.tsv
    data/quarantine/                  метки target и их манифест (только для оценки)
    gan/<generator>/                  checkpoints/{g_ab,g_ba,d_a,d_b}, history.csv
    translated/<generator>/           псевдо-target изображения и manifest.tsv
    seg/raw-source/                   сегментатор на нетранслированных source
    seg/translated-<generator>/       сегментатор только на псевдо-target
    selftrain/<generator>/iter_k/     checkpoint, pseudo_labels, report.csv, ...
    selftrain/<generator>/summary.csv
    eval/<variant>/                   case_metrics.csv, predictions/
    report/                           report.csv, report.txt

data_root вне каталога запуска принадлежит пользователю: пайплайн его
никогда не очищает. Каталог с manifest.tsv считается готовым набором
данных, пустой заполняется gen_data, непустой без манифеста отклоняется.
Сводка по нескольким сидам пишется в <run_root>/seeds-<k1>-<k2>-.../.
"""

import json
import logging
import os
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from .checkpoints import save_checkpoint
from .exceptions import AdaptationError, ConfigError, MissingInputError, PreconditionError, StageError
from .experiment import GENERATOR_NAMES, ExperimentConfig, config_digest, serialize_config
from .metrics import (
    EvalSet, MetricsReport, aggregate_report, read_case_metrics, render_table,
    write_case_metrics, write_report_csv,
)
from .phantoms import gen_dataset
from .reproducibility import configure_torch
from .segmentation import load_segmenter, predict, save_segmenter, train_segmenter, write_seg_history
from .self_training import IterationRecord, run_self_training
from .translation import (
    is_finite_history, load_generator, save_cyclegan, train_translation, translate_volume,
    volumes_to_slices, write_history,
)
from .trends import SeedResult, generator_check, render_summary, trend_checks, write_summary_csv
from .volumes import CaseEntry, DatasetManifest, load_labels, load_volume, save_volume

logger = logging.getLogger(__name__)

MARKER = '.complete'
RAW_SOURCE = 'raw-source'


def variant_name(generator: str, iteration: int) -> str:
    name = GENERATOR_NAMES[generator]
    return f'{name} w/o ST' if iteration == 0 else f'{name} w/ ST iter{iteration}'


@dataclass(frozen=True)
class StageOutcome:
    stage: str
    path: Path
    up_to_date: bool = False
    message: str = ''


@dataclass(frozen=True)
class Variant:
    """Обученный сегментатор, попадающий в отчёт отдельной строкой"""
    key: str
    name: str
    checkpoint: Path
    stage_dir: Path


class RunLayout:
    def __init__(self, run_dir: Path, data_root: Optional[Path] = None):
        self.run_dir = Path(run_dir)
        self.data_dir = Path(data_root) if data_root else self.run_dir / 'data'

    def owns(self, directory: Path) -> bool:
        """Каталог лежит строго внутри каталога запуска"""
        return self.run_dir.resolve() in Path(directory).resolve().parents

    @property
    def external_data(self) -> bool:
        return not self.owns(self.data_dir)

    @property
    def data_manifest(self) -> Path:
        return self.data_dir / 'manifest.tsv'

    @property
    def quarantine_manifest(self) -> Path:
        return self.data_dir / 'quarantine' / 'manifest.tsv'

    def gan_dir(self, generator: str) -> Path:
        return self.run_dir / 'gan' / generator

    def translated_dir(self, generator: str) -> Path:
        return self.run_dir / 'translated' / generator

    def seg_dir(self, on: str, generator: str) -> Path:
        name = RAW_SOURCE if on == 'source' else f'translated-{generator}'
        return self.run_dir / 'seg' / name

    def selftrain_dir(self, generator: str) -> Path:
        return self.run_dir / 'selftrain' / generator

    @property
    def eval_dir(self) -> Path:
        return self.run_dir / 'eval'

    @property
    def report_dir(self) -> Path:
        return self.run_dir / 'report'


def read_marker(directory: Path) -> Optional[str]:
    marker = Path(directory) / MARKER
    if not marker.is_file():
        return None
    try:
        return json.loads(marker.read_text(encoding='utf-8')).get('digest')
    except (ValueError, AttributeError):
        return None


def _require(path: Path, hint: str) -> Path:
    if not Path(path).exists():
        raise MissingInputError(f'{path} not found; run `{hint}` first')
    return Path(path)


def load_variant_reports(eval_dir: Path) -> List[Tuple[str, str, MetricsReport]]:
    """Варианты завершённой стадии eval в порядке строк отчёта: ключ, имя, отчёт"""
    path = _require(Path(eval_dir) / 'variants.json', 'eval')
    if not read_marker(eval_dir):
        raise MissingInputError(f'{eval_dir} is incomplete; run `eval` first')
    stored = json.loads(path.read_text(encoding='utf-8'))
    return [(key, name, aggregate_report(read_case_metrics(Path(eval_dir) / key / 'case_metrics.csv')))
            for key, name in stored]


class PipelineService:
    """Сервис стадий пайплайна одного каталога запуска"""

    def __init__(self, cfg: ExperimentConfig, run_root: Path, threads: int = 1, force: bool = False):
        self.cfg = cfg
        self.run_root = Path(run_root)
        run_dir = Path(cfg.run_dir) if cfg.run_dir else self.run_root / f'run-seed{cfg.seed}'
        self.layout = RunLayout(run_dir, Path(cfg.data_root) if cfg.data_root else None)
        self.threads = max(1, int(threads))
        self.force = force
        configure_torch(self.threads)

    # ----------------------------------------------------------------------
    # Служебное
    # ----------------------------------------------------------------------

    def _run_stage(self, stage: str, directory: Path, digest: str,
                   body: Callable[[Path], Optional[str]]) -> StageOutcome:
        if not self.force and read_marker(directory) == digest:
            logger.info('%s is up to date (%s)', stage, directory)
            return StageOutcome(stage, directory, up_to_date=True)
        if self.layout.owns(directory):
            if directory.exists():
                shutil.rmtree(directory)
        elif directory.exists() and any(directory.iterdir()):
            raise PreconditionError(
                f'{directory} is outside the run directory and not empty; refusing to overwrite it'
            )
        directory.mkdir(parents=True, exist_ok=True)
        self.layout.run_dir.mkdir(parents=True, exist_ok=True)
        (self.layout.run_dir / 'config.json').write_text(serialize_config(self.cfg), encoding='utf-8')

        logger.info('%s started in %s', stage, directory)
        try:
            message = body(directory) or ''
        except AdaptationError as e:
            logger.error('%s failed: %s', stage, e)
            raise
        except Exception as e:
            logger.exception('%s failed', stage)
            raise StageError(f'{stage} failed: {e}') from e
        (directory / MARKER).write_text(
            json.dumps({'stage': stage, 'digest': digest}, sort_keys=True) + '\n', encoding='utf-8'
        )
        logger.info('%s finished', stage)
        return StageOutcome(stage, directory, message=message)

    def _sections(self, *names: str) -> Dict:
        data = self.cfg.to_dict()
        return {name: data[name] for name in names}

    def _data_digest(self) -> str:
        if self.layout.external_data and self.layout.data_manifest.is_file():
            manifests = [self.layout.data_manifest, self.layout.quarantine_manifest]
            return config_digest('external', [p.read_text(encoding='utf-8') for p in manifests if p.is_file()])
        return config_digest('gen_data', self._sections('seed', 'dataset', 'phantom'))

    def _gan_digest(self, generator: str) -> str:
        return config_digest('train_gan', self._data_digest(), generator, self._sections('translation'))

    def _translate_digest(self, generator: str) -> str:
        return config_digest('translate', self._gan_digest(generator))

    def _data_manifest(self) -> DatasetManifest:
        return DatasetManifest.read(_require(self.layout.data_manifest, 'gen_data'))

    def _translated_manifest(self, generator: str) -> DatasetManifest:
        path = self.layout.translated_dir(generator) / 'manifest.tsv'
        return DatasetManifest.read(_require(path, f'translate (generator {generator})'))

    @staticmethod
    def _labelled_cases(manifest: DatasetManifest, entries: Sequence[CaseEntry]):
        cases = []
        for entry in entries:
            if not entry.label:
                raise PreconditionError(f'case {entry.case_id} has no label in {manifest.root}')
            cases.append((load_volume(manifest.image_path(entry)), load_labels(manifest.label_path(entry))))
        return cases

    def _eval_set(self) -> EvalSet:
        return EvalSet.from_quarantine(
            self.layout.quarantine_manifest, self.cfg.evaluation.empty_penalty_mm, self.threads
        )

    # ----------------------------------------------------------------------
    # Стадии
    # ----------------------------------------------------------------------

    def gen_data(self) -> StageOutcome:
        dataset = self.cfg.dataset
        if self.layout.external_data and self.layout.data_manifest.is_file():
            logger.info('gen_data skipped: using the dataset in %s', self.layout.data_dir)
            return StageOutcome('gen_data', self.layout.data_dir, up_to_date=True)

        def body(out: Path):
            gen_dataset(self.cfg.phantom, dataset.n_source, dataset.n_target_train,
                        dataset.n_target_eval, self.cfg.seed, out, self.threads)
            return f'{dataset.n_source} source and {dataset.n_target_train + dataset.n_target_eval} target cases'

        return self._run_stage('gen_data', self.layout.data_dir, self._data_digest(), body)

    def train_gan(self, generator: Optional[str] = None) -> StageOutcome:
        generator = generator or self.cfg.generator
        tcfg = self.cfg.translation_config(generator)

        def body(out: Path):
            manifest = self._data_manifest()
            source = [load_volume(manifest.image_path(e)) for e in manifest.select('source')]
            target = [load_volume(manifest.image_path(e)) for e in manifest.select('target', 'train')]
            result = train_translation(
                volumes_to_slices(source, tcfg.slice_size), volumes_to_slices(target, tcfg.slice_size), tcfg
            )
            write_history(out / 'history.csv', result.history)
            if not is_finite_history(result.history):
                raise StageError(f'translation losses of the {generator} generator became non-finite')
            save_cyclegan(out / 'checkpoints', result.models)
            return f'{tcfg.total_epochs} epochs, generator {generator}'

        return self._run_stage(f'train_gan[{generator}]', self.layout.gan_dir(generator),
                               self._gan_digest(generator), body)

    def translate(self, generator: Optional[str] = None) -> StageOutcome:
        generator = generator or self.cfg.generator
        tcfg = self.cfg.translation_config(generator)

        def body(out: Path):
            manifest = self._data_manifest()
            model = load_generator(self.layout.gan_dir(generator) / 'checkpoints', 'g_ab')
            translated = DatasetManifest(root=out)
            for entry in manifest.select('source'):
                volume = translate_volume(load_volume(manifest.image_path(entry)), model, tcfg)
                image_rel = f'images/{entry.case_id}.nii'
                save_volume(out / image_rel, volume)
                label_rel = Path(os.path.relpath(manifest.label_path(entry), out)).as_posix()
                translated.entries.append(CaseEntry(entry.case_id, 'source', 'train', image_rel, label_rel))
            translated.write(out / 'manifest.tsv')
            return f'{len(translated.entries)} volumes translated to the target domain'

        return self._run_stage(f'translate[{generator}]', self.layout.translated_dir(generator),
                               self._translate_digest(generator), body)

    def train_seg(self, on: str = 'translated', generator: Optional[str] = None) -> StageOutcome:
        """Сегментатор вне цикла самообучения: на исходных source или на псевдо-target"""
        generator = generator or self.cfg.generator
        if on not in ('source', 'translated'):
            raise PreconditionError(f'train_seg expects --on source|translated, got {on!r}')
        upstream = self._data_digest() if on == 'source' else self._translate_digest(generator)
        digest = config_digest('train_seg', on, upstream, self._sections('segmentation'), self.cfg.seed)

        def body(out: Path):
            if on == 'source':
                manifest = self._data_manifest()
                entries = manifest.select('source')
            else:
                manifest = self._translated_manifest(generator)
                entries = manifest.entries
            result = train_segmenter(self._labelled_cases(manifest, entries), self.cfg.segmentation_config())
            save_segmenter(out, result)
            return f'{len(entries)} cases, final loss {result.history[-1]:.4f}' if result.history else ''

        return self._run_stage(f'train_seg[{on}]', self.layout.seg_dir(on, generator), digest, body)

    def self_train(self, generator: Optional[str] = None, n_iters: Optional[int] = None) -> StageOutcome:
        generator = generator or self.cfg.generator
        stcfg = self.cfg.self_training_config(n_iters)
        digest = config_digest(
            'self_train', self._translate_digest(generator), stcfg.n_iters,
            self._sections('seed', 'segmentation', 'self_training', 'evaluation'),
        )

        def body(out: Path):
            translated = self._translated_manifest(generator)
            pseudo_target = self._labelled_cases(translated, translated.entries)
            data = self._data_manifest()
            real_target = {e.case_id: load_volume(data.image_path(e)) for e in data.select('target', 'train')}
            eval_set = self._eval_set()
            summary: List[Tuple[str, MetricsReport]] = []

            def persist(record: IterationRecord):
                iteration_dir = out / f'iter_{record.iteration}'
                name = variant_name(generator, record.iteration)
                save_checkpoint(iteration_dir / 'checkpoint', record.model, record.optim_state)
                write_seg_history(iteration_dir / 'history.csv', record.history)
                for case_id, labels in record.pseudo_labels.items():
                    save_volume(iteration_dir / 'pseudo_labels' / f'{case_id}.nii', labels)
                write_case_metrics(iteration_dir / 'case_metrics.csv', record.report.cases)
                write_report_csv(iteration_dir / 'report.csv', [(name, record.report)])
                summary.append((name, record.report))
                logger.info('%s: %d training cases, mean DSC %s',
                            name, record.n_train, record.report.mean_dsc)

            run_self_training(pseudo_target, real_target, eval_set, stcfg,
                              on_iteration=persist, threads=self.threads)
            write_report_csv(out / 'summary.csv', summary)
            return f'{stcfg.n_iters} iterations, final mean DSC {summary[-1][1].mean_dsc}'

        return self._run_stage(f'self_train[{generator}]', self.layout.selftrain_dir(generator), digest, body)

    def discover_variants(self) -> List[Variant]:
        """Завершённые модели в порядке строк отчёта"""
        variants = []
        raw = self.layout.seg_dir('source', self.cfg.generator)
        if read_marker(raw):
            variants.append(Variant(RAW_SOURCE, 'Raw source w/o translation', raw / 'checkpoint', raw))

        def iterations(generator: str, limit: Optional[int] = None):
            directory = self.layout.selftrain_dir(generator)
            if not read_marker(directory):
                return
            k = 0
            while (directory / f'iter_{k}' / 'checkpoint').exists() and (limit is None or k <= limit):
                yield Variant(f'{generator}-iter{k}', variant_name(generator, k),
                              directory / f'iter_{k}' / 'checkpoint', directory)
                k += 1

        variants += list(iterations(self.cfg.other_generator, limit=0))
        variants += list(iterations(self.cfg.generator))
        return variants

    def evaluate(self) -> StageOutcome:
        variants = self.discover_variants()
        if not variants:
            raise MissingInputError('no trained segmenters found; run `train_seg` or `self_train` first')
        digest = config_digest('eval', self._sections('evaluation'),
                               [(v.key, read_marker(v.stage_dir)) for v in variants])

        def body(out: Path):
            eval_set = self._eval_set()
            for variant in variants:
                model, _ = load_segmenter(variant.checkpoint)
                predictions = out / variant.key / 'predictions'
                report = eval_set.evaluate(
                    lambda vol: predict(vol, model),
                    on_prediction=lambda case_id, labels: save_volume(predictions / f'{case_id}.nii', labels),
                )
                write_case_metrics(out / variant.key / 'case_metrics.csv', report.cases)
            (out / 'variants.json').write_text(
                json.dumps([[v.key, v.name] for v in variants], indent=2) + '\n', encoding='utf-8'
            )
            return f'{len(variants)} variants on {len(eval_set)} eval cases'

        return self._run_stage('eval', self.layout.eval_dir, digest, body)

    def report(self) -> StageOutcome:
        stored = load_variant_reports(self.layout.eval_dir)
        digest = config_digest('report', read_marker(self.layout.eval_dir))

        def body(out: Path):
            rows = [(name, report) for _, name, report in stored]
            write_report_csv(out / 'report.csv', rows)
            text = render_table(rows)
            check = generator_check([SeedResult.from_reports(self.cfg.seed, stored)])
            if check:
                if not check.holds:
                    logger.warning(check.line)
                text += '\n' + check.line + '\n'
            (out / 'report.txt').write_text(text, encoding='utf-8')
            return check.line if check else ''

        return self._run_stage('report', self.layout.report_dir, digest, body)

    def summarize_seeds(self, seeds: Sequence[int]) -> StageOutcome:
        """
        Сводка запусков run-seed<k> под корнем запусков: средний DSC каждого
        варианта по сидам, медианы и проверки трендов. Всегда пересчитывается.
        """
        if self.cfg.run_dir:
            raise ConfigError('a seed summary needs runs under the run root; drop run_dir from the config')
        seeds = list(seeds)
        if not seeds or len(set(seeds)) != len(seeds):
            raise PreconditionError(f'seeds must be distinct and non-empty, got {seeds}')
        results = [
            SeedResult.from_reports(seed, load_variant_reports(RunLayout(self.run_root / f'run-seed{seed}').eval_dir))
            for seed in seeds
        ]
        checks = trend_checks(results, self.cfg.generator)
        out = self.run_root / ('seeds-' + '-'.join(str(seed) for seed in seeds))
        out.mkdir(parents=True, exist_ok=True)
        write_summary_csv(out / 'summary.csv', results)
        (out / 'summary.txt').write_text(render_summary(results, checks), encoding='utf-8')
        held = sum(1 for check in checks if check.holds)
        logger.info('seed summary of %d runs written to %s', len(seeds), out)
        return StageOutcome('report[seeds]', out, message=f'{len(seeds)} seeds, {held} of {len(checks)} trend checks hold')

    def run_all(self) -> List[StageOutcome]:
        outcomes = [
            self.gen_data(),
            self.train_gan(),
            self.translate(),
            self.train_seg('source'),
            self.self_train(),
        ]
        if self.cfg.compare_generators:
            other = self.cfg.other_generator
            outcomes += [self.train_gan(other), self.translate(other), self.self_train(other, n_iters=0)]
        outcomes += [self.evaluate(), self.report()]
        return outcomes
