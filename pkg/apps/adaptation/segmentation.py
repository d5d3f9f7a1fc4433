"""
Обучение объёмного сегментатора на парах (изображение, метки) и предсказание
карт меток.

Изображения перед подачей в сеть нормируются z-score по объёму. Обучение
идёт на патчах размера patch_size (случайный кроп или дополнение нулями),
предсказание выполняется неперекрывающимися тайлами того же размера.
"""

import copy
import csv
import itertools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from .checkpoints import load_checkpoint, save_checkpoint
from .exceptions import (
    DimensionMismatchError, IncompatibleModelError, MissingInputError, PreconditionError,
)
from .losses import dice_ce
from .networks import SEGMENTER, ParamsModule, build_segmenter_3d
from .optim import SEGMENTER_BETAS, Adam, OptimState
from .preprocess import ZSCORE, normalize
from .reproducibility import derive_seed
from .volumes import LabelVolume, Volume3D

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SegTrainConfig:
    epochs: int = 1000
    lr: float = 1e-3
    batch_size: int = 2
    patch_size: Tuple[int, int, int] = (64, 64, 16)
    base_width: int = 16
    depth: int = 3
    n_classes: int = 3
    flips: bool = True
    betas: Tuple[float, float] = SEGMENTER_BETAS
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise PreconditionError('epochs must be >= 0')
        if self.batch_size < 1:
            raise PreconditionError('batch size must be >= 1')
        if self.lr < 0:
            raise PreconditionError('learning rate must be >= 0')
        if self.depth < 1 or self.n_classes < 2 or self.base_width < 1:
            raise PreconditionError('segmenter needs depth >= 1, n_classes >= 2 and base_width >= 1')
        factor = 2 ** self.depth
        if len(self.patch_size) != 3 or any(p < 2 * factor or p % factor for p in self.patch_size):
            raise PreconditionError(
                f'patch size {tuple(self.patch_size)} must be divisible by 2^depth = {factor} '
                f'and at least {2 * factor} per axis'
            )


@dataclass
class SegTrainResult:
    model: ParamsModule
    history: List[float] = field(default_factory=list)
    optim_state: Optional[OptimState] = None


def _check_segmenter(model):
    if getattr(model, 'role', None) != SEGMENTER:
        raise IncompatibleModelError(f'{type(model).__name__} is not a volumetric segmenter')
    if model.hparams.get('in_channels', 1) != 1:
        raise IncompatibleModelError('segmenter must take a single input channel')


def _prepare_image(vol: Volume3D) -> np.ndarray:
    normed, _ = normalize(vol, ZSCORE)
    return normed.voxels.astype(np.float32)


def _prepare_cases(cases, n_classes: int):
    prepared = []
    for index, (image, labels) in enumerate(cases):
        if image.shape != labels.shape:
            raise DimensionMismatchError(
                f'case {index}: image {image.shape} and labels {labels.shape} differ'
            )
        if int(labels.labels.max()) >= n_classes:
            raise PreconditionError(
                f'case {index}: label {int(labels.labels.max())} exceeds {n_classes} classes'
            )
        prepared.append((_prepare_image(image), labels.labels.astype(np.int64)))
    return prepared


def _fit_to_patch(image: np.ndarray, labels: np.ndarray, patch, rng: np.random.Generator):
    """Случайный кроп по осям длиннее патча, дополнение нулями по остальным"""
    window = []
    for n, p in zip(image.shape, patch):
        start = int(rng.integers(0, n - p + 1)) if n > p else 0
        window.append(slice(start, start + p))
    image = image[tuple(window)]
    labels = labels[tuple(window)]
    pad = [(0, p - n) for n, p in zip(image.shape, patch)]
    if any(after for _, after in pad):
        image = np.pad(image, pad)
        labels = np.pad(labels, pad)
    return image, labels


def _augment(image: np.ndarray, labels: np.ndarray, rng: np.random.Generator):
    for axis in range(3):
        if rng.random() < 0.5:
            image = np.flip(image, axis=axis)
            labels = np.flip(labels, axis=axis)
    return np.ascontiguousarray(image), np.ascontiguousarray(labels)


def _initial_model(cfg: SegTrainConfig, init_model: Optional[ParamsModule]) -> ParamsModule:
    if init_model is None:
        return build_segmenter_3d(
            cfg.base_width, cfg.depth, cfg.n_classes, patch_size=cfg.patch_size,
            seed=derive_seed(cfg.seed, 'segmenter_init'),
        )
    _check_segmenter(init_model)
    if init_model.n_classes != cfg.n_classes or init_model.patch_size != tuple(cfg.patch_size):
        raise IncompatibleModelError('initial model does not match classes or patch size of the config')
    return copy.deepcopy(init_model)


def train_segmenter(cases: Sequence[Tuple[Volume3D, LabelVolume]], cfg: SegTrainConfig,
                    init_model: Optional[ParamsModule] = None,
                    init_state: Optional[OptimState] = None) -> SegTrainResult:
    """
    Обучение Dice + CE на перемешанных кейсах в течение cfg.epochs эпох.

    С init_model обучение продолжается с копии переданной модели
    (исходная не меняется), иначе модель создаётся заново от seed конфига.
    """
    if not cases:
        raise PreconditionError('segmenter training needs at least one case')
    prepared = _prepare_cases(cases, cfg.n_classes)
    model = _initial_model(cfg, init_model)
    optimizer = Adam(model, betas=cfg.betas, state=copy.deepcopy(init_state))
    order_rng = np.random.default_rng(derive_seed(cfg.seed, 'batches'))
    augment_rng = np.random.default_rng(derive_seed(cfg.seed, 'augment'))
    result = SegTrainResult(model=model)

    model.train()
    for epoch in range(1, cfg.epochs + 1):
        order = order_rng.permutation(len(prepared))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            images, labels = [], []
            for index in order[start:start + cfg.batch_size]:
                image, label = _fit_to_patch(*prepared[index], cfg.patch_size, augment_rng)
                if cfg.flips:
                    image, label = _augment(image, label, augment_rng)
                images.append(image)
                labels.append(label)
            batch = torch.from_numpy(np.stack(images)).unsqueeze(1)
            target = torch.from_numpy(np.stack(labels))
            optimizer.zero_grad()
            loss = dice_ce(model(batch), target)
            loss.backward()
            optimizer.step(cfg.lr)
            losses.append(float(loss))
        result.history.append(float(np.mean(losses)))
        logger.info('Segmenter epoch %d/%d loss=%.4f', epoch, cfg.epochs, result.history[-1])

    result.optim_state = optimizer.state
    return result


def logits_to_labels(logits: np.ndarray) -> np.ndarray:
    """(C, *spatial) -> метки; при равенстве побеждает меньший индекс класса"""
    return np.argmax(np.asarray(logits), axis=0).astype(np.uint8)


def predict(vol: Volume3D, model: ParamsModule, force_padding: bool = False) -> LabelVolume:
    """
    Повоксельный argmax логитов. Объём дополняется до кратного патчу
    размера (force_padding добавляет ещё один патч по каждой оси),
    тайлы не перекрываются, результат обрезается до исходной сетки.
    """
    _check_segmenter(model)
    patch = model.patch_size
    image = _prepare_image(vol)
    padded_shape = tuple(
        max(1, math.ceil(n / p)) * p + (p if force_padding else 0)
        for n, p in zip(image.shape, patch)
    )
    padded = np.zeros(padded_shape, dtype=np.float32)
    padded[tuple(slice(0, n) for n in image.shape)] = image
    labels = np.zeros(padded_shape, dtype=np.uint8)

    model.eval()
    with torch.no_grad():
        for corner in itertools.product(*(range(0, s, p) for s, p in zip(padded_shape, patch))):
            window = tuple(slice(c, c + p) for c, p in zip(corner, patch))
            tile = torch.from_numpy(np.ascontiguousarray(padded[window]))[None, None]
            labels[window] = logits_to_labels(model(tile)[0].numpy())
    cropped = labels[tuple(slice(0, n) for n in image.shape)]
    return LabelVolume(cropped, vol.spacing, vol.origin, classes=tuple(range(model.n_classes)))


def write_seg_history(path: Path, history: Sequence[float]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='') as fh:
        writer = csv.writer(fh, lineterminator='\n')
        writer.writerow(['epoch', 'loss'])
        for epoch, loss in enumerate(history, start=1):
            writer.writerow([epoch, repr(loss)])
    return path


def save_segmenter(path: Path, result: SegTrainResult) -> Path:
    path = Path(path)
    save_checkpoint(path / 'checkpoint', result.model, result.optim_state)
    write_seg_history(path / 'history.csv', result.history)
    return path


def load_segmenter(path: Path) -> Tuple[ParamsModule, Optional[OptimState]]:
    checkpoint = Path(path)
    if not (checkpoint / 'manifest.txt').exists():
        raise MissingInputError(f'no trained segmenter at {checkpoint}')
    model, state = load_checkpoint(checkpoint)
    _check_segmenter(model)
    return model, state
