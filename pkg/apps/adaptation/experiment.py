"""
Конфигурация эксперимента: разбор JSON, пресеты масштаба и каноническая
сериализация.

Значения по умолчанию в dataclass-ах соответствуют полному масштабу.
Пресет "desk" накладывается поверх них до валидации; явно заданные ключи
всегда имеют приоритет над пресетом.
"""

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Optional

from .exceptions import ConfigError, ConfigSyntaxError, ConfigValidationError, PreconditionError
from .phantoms import ModalityMap, PhantomSpec
from .reproducibility import derive_seed
from .segmentation import SegTrainConfig
from .self_training import SelfTrainConfig
from .serializers import ExperimentConfigSerializer
from .translation import TranslationConfig

PRESETS = {
    'desk': {
        'translation': {
            'epochs_const': 30,
            'epochs_decay': 30,
            'slice_size': 64,
            'base_width': 16,
            'n_res_blocks': 4,
            'unet_down': 5,
            'disc_width': 16,
            'disc_layers': 3,
        },
        'segmentation': {'epochs': 40},
    },
    'full': {},
}

GENERATOR_NAMES = {'resnet': 'ResNet', 'unet': 'U-net'}


@dataclass(frozen=True)
class DatasetConfig:
    n_source: int = 30
    n_target_train: int = 30
    n_target_eval: int = 10

    def __post_init__(self):
        if min(self.n_source, self.n_target_train, self.n_target_eval) < 1:
            raise PreconditionError('every cohort needs at least one case')


@dataclass(frozen=True)
class SelfTrainingSection:
    n_iters: int = 3
    retrain_from_scratch: bool = True

    def __post_init__(self):
        if self.n_iters < 0:
            raise PreconditionError('n_iters must be >= 0')


@dataclass(frozen=True)
class EvalConfig:
    # None: диагональ сетки в мм
    empty_penalty_mm: Optional[float] = None


@dataclass(frozen=True)
class ExperimentConfig:
    scale: str = 'desk'
    seed: int = 0
    run_dir: str = ''
    data_root: str = ''
    generator: str = 'resnet'
    compare_generators: bool = False
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    translation: TranslationConfig = field(default_factory=TranslationConfig)
    segmentation: SegTrainConfig = field(default_factory=SegTrainConfig)
    self_training: SelfTrainingSection = field(default_factory=SelfTrainingSection)
    evaluation: EvalConfig = field(default_factory=EvalConfig)

    @property
    def other_generator(self) -> str:
        return 'unet' if self.generator == 'resnet' else 'resnet'

    def translation_config(self, generator: Optional[str] = None) -> TranslationConfig:
        return replace(self.translation, generator=generator or self.generator,
                       seed=derive_seed(self.seed, 'translation'))

    def segmentation_config(self) -> SegTrainConfig:
        return replace(self.segmentation, seed=derive_seed(self.seed, 'segmentation'))

    def self_training_config(self, n_iters: Optional[int] = None) -> SelfTrainConfig:
        return SelfTrainConfig(
            n_iters=self.self_training.n_iters if n_iters is None else n_iters,
            segmentation=self.segmentation,
            retrain_from_scratch=self.self_training.retrain_from_scratch,
            seed=derive_seed(self.seed, 'self_training'),
        )

    def to_dict(self) -> Dict[str, Any]:
        """Полный набор ключей; сиды стадий не хранятся, они выводятся из seed"""
        translation = asdict(self.translation)
        del translation['generator'], translation['seed']
        segmentation = asdict(self.segmentation)
        del segmentation['seed']
        return {
            'scale': self.scale,
            'seed': self.seed,
            'run_dir': self.run_dir,
            'data_root': self.data_root,
            'generator': self.generator,
            'compare_generators': self.compare_generators,
            'dataset': asdict(self.dataset),
            'phantom': asdict(self.phantom),
            'translation': translation,
            'segmentation': segmentation,
            'self_training': asdict(self.self_training),
            'evaluation': asdict(self.evaluation),
        }


def deep_merge(base: Dict, override: Dict) -> Dict:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _flatten_errors(errors, prefix='') -> Dict[str, list]:
    flat = {}
    if isinstance(errors, dict):
        for key, value in errors.items():
            flat.update(_flatten_errors(value, f'{prefix}.{key}' if prefix else str(key)))
    elif isinstance(errors, list) and errors and all(not isinstance(e, (dict, list)) for e in errors):
        flat[prefix or 'config'] = [str(e) for e in errors]
    elif isinstance(errors, list):
        for index, value in enumerate(errors):
            flat.update(_flatten_errors(value, f'{prefix}[{index}]'))
    else:
        flat[prefix or 'config'] = [str(errors)]
    return flat


def _tuples(data: Dict) -> Dict:
    return {key: tuple(value) if isinstance(value, list) else value for key, value in data.items()}


def _build(data: Dict) -> ExperimentConfig:
    phantom = _tuples(dict(data.get('phantom', {})))
    for key in ('source_map', 'target_map'):
        if key in phantom:
            phantom[key] = ModalityMap(**phantom[key])
    sections = {
        'dataset': lambda: DatasetConfig(**data.get('dataset', {})),
        'phantom': lambda: PhantomSpec(**phantom),
        'translation': lambda: TranslationConfig(generator=data.get('generator', 'resnet'),
                                                 **_tuples(dict(data.get('translation', {})))),
        'segmentation': lambda: SegTrainConfig(**_tuples(dict(data.get('segmentation', {})))),
        'self_training': lambda: SelfTrainingSection(**data.get('self_training', {})),
        'evaluation': lambda: EvalConfig(**data.get('evaluation', {})),
    }
    built = {}
    for name, make in sections.items():
        try:
            built[name] = make()
        except PreconditionError as e:
            raise ConfigValidationError({name: [str(e)]}) from e
    top = {key: data[key] for key in ('scale', 'seed', 'run_dir', 'data_root', 'generator',
                                      'compare_generators') if key in data}
    return ExperimentConfig(**top, **built)


def parse_config(text: str) -> ExperimentConfig:
    """JSON-текст -> ExperimentConfig; пустой текст даёт значения по умолчанию"""
    try:
        data = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as e:
        raise ConfigSyntaxError(e.msg, line=e.lineno) from e
    if not isinstance(data, dict):
        raise ConfigSyntaxError('experiment config must be a JSON object', line=1)

    scale = data.get('scale', 'desk')
    merged = deep_merge(PRESETS.get(scale, {}), data)
    serializer = ExperimentConfigSerializer(data=merged)
    if not serializer.is_valid():
        raise ConfigValidationError(_flatten_errors(serializer.errors))
    return _build(serializer.validated_data)


def serialize_config(cfg: ExperimentConfig) -> str:
    """Каноническая форма: отсортированные ключи, отступ 2, перевод строки в конце"""
    return json.dumps(cfg.to_dict(), sort_keys=True, indent=2, ensure_ascii=False) + '\n'


def config_digest(*parts: Any) -> str:
    payload = json.dumps(parts, sort_keys=True, separators=(',', ':'), default=str)
    return hashlib.sha256(payload.encode('utf-8')).hexdigest()


def load_config(path: Optional[Path] = None, seed: Optional[int] = None) -> ExperimentConfig:
    """Чтение файла конфигурации (или значения по умолчанию) с необязательной заменой seed"""
    text = ''
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f'config file {path} not found')
        text = path.read_text(encoding='utf-8')
    cfg = parse_config(text)
    if seed is not None:
        if seed < 0:
            raise ConfigValidationError({'seed': ['Ensure this value is greater than or equal to 0.']})
        cfg = replace(cfg, seed=seed)
    return cfg
