"""
Непарная трансляция source <-> target (CycleGAN) и перевод размеченных
source-объёмов в псевдо-target.
"""

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple

import numpy as np
import torch

from .checkpoints import load_checkpoint, save_checkpoint
from .exceptions import IncompatibleModelError, MissingInputError, PreconditionError, ShapeMismatchError
from .losses import l1_loss, lsgan_loss
from .networks import (
    GENERATOR, GENERATOR_ARCHS, MIN_RESNET_SIDE, ParamsModule, build_patchgan_discriminator,
    build_resnet_generator, build_unet_generator, patchgan_receptive_field,
)
from .optim import GAN_BETAS, Adam
from .preprocess import MINMAX, normalize, resize_stack, slice_z
from .reproducibility import derive_seed
from .volumes import Volume3D

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TranslationConfig:
    """Гиперпараметры трансляции; значения по умолчанию полного масштаба"""
    lambda_adv: float = 1.0
    lambda_cyc: float = 10.0
    lambda_id: float = 5.0
    lr: float = 1.5e-4
    epochs_const: int = 100
    epochs_decay: int = 100
    batch_size: int = 10
    pool_size: int = 50
    slice_size: int = 256
    generator: str = 'resnet'
    base_width: int = 64
    n_res_blocks: int = 9
    unet_down: int = 8
    disc_width: int = 64
    disc_layers: int = 4
    betas: Tuple[float, float] = GAN_BETAS
    seed: int = 0

    def __post_init__(self):
        if min(self.lambda_adv, self.lambda_cyc, self.lambda_id) < 0:
            raise PreconditionError('loss weights must be >= 0')
        if self.epochs_const < 0 or self.epochs_decay < 0:
            raise PreconditionError('epoch counts must be >= 0')
        if self.batch_size < 1:
            raise PreconditionError('batch size must be >= 1')
        if self.pool_size < 0:
            raise PreconditionError('pool size must be >= 0')
        if self.lr < 0:
            raise PreconditionError('learning rate must be >= 0')
        if self.slice_size < MIN_RESNET_SIDE or self.slice_size % 4:
            raise PreconditionError(f'slice size must be a multiple of 4 and at least {MIN_RESNET_SIDE}')
        if self.generator not in GENERATOR_ARCHS:
            raise PreconditionError(f'generator must be one of {sorted(GENERATOR_ARCHS)}')
        field = patchgan_receptive_field(self.disc_layers)
        if field > self.slice_size:
            raise PreconditionError(
                f'discriminator receptive field {field} exceeds slice size {self.slice_size}'
            )
        if self.generator == 'unet' and self.slice_size % 2 ** self.unet_down:
            raise PreconditionError(
                f'slice size {self.slice_size} must be divisible by 2^unet_down = {2 ** self.unet_down}'
            )

    @property
    def total_epochs(self) -> int:
        return self.epochs_const + self.epochs_decay


def lr_schedule(epoch: int, cfg: TranslationConfig) -> float:
    """
    Постоянный lr0 первые E_const эпох, затем линейный спад за E_decay.
    Последняя эпоха не обучается с нулевым шагом: нижняя граница lr0 / E_decay.
    """
    if not 1 <= epoch <= cfg.total_epochs:
        raise PreconditionError(f'epoch {epoch} is outside [1, {cfg.total_epochs}]')
    if epoch <= cfg.epochs_const:
        return cfg.lr
    remaining = max(cfg.total_epochs - epoch, 1)
    return cfg.lr * remaining / cfg.epochs_decay


class ImagePool:
    """Буфер сгенерированных изображений для дискриминатора"""

    def __init__(self, capacity: int = 50, seed: int = 0):
        self.capacity = capacity
        self.images: List[torch.Tensor] = []
        self.rng = np.random.default_rng(seed)

    def __len__(self):
        return len(self.images)

    def query(self, fresh: torch.Tensor) -> torch.Tensor:
        fresh = fresh.detach()
        if self.capacity == 0:
            return fresh
        result = []
        for image in fresh:
            if len(self.images) < self.capacity:
                self.images.append(image.clone())
                result.append(image)
            elif self.rng.uniform() < 0.5:
                index = int(self.rng.integers(self.capacity))
                result.append(self.images[index].clone())
                self.images[index] = image.clone()
            else:
                result.append(image)
        return torch.stack(result, dim=0)


def pool_query(pool: ImagePool, fresh: torch.Tensor) -> torch.Tensor:
    return pool.query(fresh)


@dataclass
class CycleGANModels:
    g_ab: ParamsModule
    g_ba: ParamsModule
    d_a: ParamsModule
    d_b: ParamsModule

    def items(self):
        return [('g_ab', self.g_ab), ('g_ba', self.g_ba), ('d_a', self.d_a), ('d_b', self.d_b)]


@dataclass
class CycleGANOptimizers:
    g_ab: Adam
    g_ba: Adam
    d_a: Adam
    d_b: Adam

    @classmethod
    def for_models(cls, models: CycleGANModels, betas=GAN_BETAS) -> 'CycleGANOptimizers':
        return cls(*(Adam(model, betas=betas) for _, model in models.items()))


@dataclass
class ImagePools:
    a: ImagePool
    b: ImagePool


@dataclass(frozen=True)
class LossComponents:
    gen_adv: float
    gen_cyc: float
    gen_id: float
    gen_total: float
    disc_a: float
    disc_b: float

    @classmethod
    def mean(cls, items: Sequence['LossComponents']) -> 'LossComponents':
        return cls(*(float(np.mean([getattr(i, f.name) for i in items])) for f in fields(cls)))


@dataclass(frozen=True)
class EpochLosses:
    epoch: int
    lr: float
    losses: LossComponents


HISTORY_COLUMNS = ['epoch'] + [f.name for f in fields(LossComponents)] + ['lr']


def build_generator(cfg: TranslationConfig, seed: int, kind: str = None) -> ParamsModule:
    kind = kind or cfg.generator
    if kind == 'resnet':
        return build_resnet_generator(cfg.base_width, cfg.n_res_blocks, seed=seed)
    return build_unet_generator(cfg.base_width, cfg.unet_down, seed=seed)


def build_cyclegan(cfg: TranslationConfig) -> CycleGANModels:
    return CycleGANModels(
        g_ab=build_generator(cfg, derive_seed(cfg.seed, 'g_ab')),
        g_ba=build_generator(cfg, derive_seed(cfg.seed, 'g_ba')),
        d_a=build_patchgan_discriminator(cfg.disc_width, cfg.disc_layers, seed=derive_seed(cfg.seed, 'd_a')),
        d_b=build_patchgan_discriminator(cfg.disc_width, cfg.disc_layers, seed=derive_seed(cfg.seed, 'd_b')),
    )


def generator_objective(adv, cyc, idt, cfg: TranslationConfig):
    """λ_adv·adv + λ_cyc·cyc + λ_id·id"""
    return cfg.lambda_adv * adv + cfg.lambda_cyc * cyc + cfg.lambda_id * idt


def cyclegan_step(batch_a: torch.Tensor, batch_b: torch.Tensor, models: CycleGANModels,
                  pools: ImagePools, optimizers: CycleGANOptimizers, cfg: TranslationConfig,
                  lr: float) -> LossComponents:
    """Один шаг: генераторы, затем оба дискриминатора на пуле подделок"""
    if batch_a.ndim != 4 or batch_a.shape[1:] != batch_b.shape[1:]:
        raise ShapeMismatchError(
            f'domain batches must share (C, H, W): {tuple(batch_a.shape)} vs {tuple(batch_b.shape)}'
        )
    optimizers.g_ab.zero_grad()
    optimizers.g_ba.zero_grad()

    fake_b = models.g_ab(batch_a)
    fake_a = models.g_ba(batch_b)
    adv = lsgan_loss(models.d_b(fake_b), 1) + lsgan_loss(models.d_a(fake_a), 1)
    cyc = l1_loss(models.g_ba(fake_b), batch_a) + l1_loss(models.g_ab(fake_a), batch_b)
    idt = l1_loss(models.g_ab(batch_b), batch_b) + l1_loss(models.g_ba(batch_a), batch_a)
    total = generator_objective(adv, cyc, idt, cfg)
    total.backward()
    optimizers.g_ab.step(lr)
    optimizers.g_ba.step(lr)

    optimizers.d_a.zero_grad()
    optimizers.d_b.zero_grad()
    pooled_a = pools.a.query(fake_a)
    pooled_b = pools.b.query(fake_b)
    loss_d_a = 0.5 * (lsgan_loss(models.d_a(batch_a), 1) + lsgan_loss(models.d_a(pooled_a), 0))
    loss_d_b = 0.5 * (lsgan_loss(models.d_b(batch_b), 1) + lsgan_loss(models.d_b(pooled_b), 0))
    (loss_d_a + loss_d_b).backward()
    optimizers.d_a.step(lr)
    optimizers.d_b.step(lr)

    adv, cyc, idt = float(adv), float(cyc), float(idt)
    return LossComponents(
        gen_adv=adv, gen_cyc=cyc, gen_id=idt,
        gen_total=generator_objective(adv, cyc, idt, cfg),
        disc_a=float(loss_d_a), disc_b=float(loss_d_b),
    )


def volumes_to_slices(volumes: Iterable[Volume3D], slice_size: int) -> np.ndarray:
    """minmax-нормализация, нарезка по z и ресайз к slice_size: (n, s, s) float32"""
    stacks = []
    for vol in volumes:
        normed, _ = normalize(vol, MINMAX)
        stack = slice_z(normed).as_array()
        stacks.append(resize_stack(stack, slice_size, slice_size))
    if not stacks:
        return np.zeros((0, slice_size, slice_size), dtype=np.float32)
    return np.concatenate(stacks, axis=0).astype(np.float32)


def _epoch_order(rng: np.random.Generator, size: int, length: int) -> np.ndarray:
    """Перемешанный порядок длины length; меньший домен проходится по кругу с перемешиванием"""
    chunks = []
    total = 0
    while total < length:
        chunks.append(rng.permutation(size))
        total += size
    return np.concatenate(chunks)[:length]


@dataclass
class TranslationResult:
    models: CycleGANModels
    history: List[EpochLosses] = field(default_factory=list)

    @property
    def g_ab(self):
        return self.models.g_ab

    @property
    def g_ba(self):
        return self.models.g_ba


def train_translation(source_slices: np.ndarray, target_slices: np.ndarray,
                      cfg: TranslationConfig) -> TranslationResult:
    """
    Обучение CycleGAN на срезах двух доменов.

    Эпоха: один проход по большему из двух наборов срезов.
    """
    source_slices = np.asarray(source_slices, dtype=np.float32)
    target_slices = np.asarray(target_slices, dtype=np.float32)
    if len(source_slices) == 0 or len(target_slices) == 0:
        raise PreconditionError('both domains need at least one slice')
    if source_slices.shape[1:] != target_slices.shape[1:]:
        raise ShapeMismatchError(
            f'slice sizes differ: {source_slices.shape[1:]} vs {target_slices.shape[1:]}'
        )

    models = build_cyclegan(cfg)
    optimizers = CycleGANOptimizers.for_models(models, cfg.betas)
    pools = ImagePools(
        a=ImagePool(cfg.pool_size, derive_seed(cfg.seed, 'pool_a')),
        b=ImagePool(cfg.pool_size, derive_seed(cfg.seed, 'pool_b')),
    )
    rng = np.random.default_rng(derive_seed(cfg.seed, 'batches'))
    length = max(len(source_slices), len(target_slices))
    result = TranslationResult(models=models)

    for epoch in range(1, cfg.total_epochs + 1):
        lr = lr_schedule(epoch, cfg)
        order_a = _epoch_order(rng, len(source_slices), length)
        order_b = _epoch_order(rng, len(target_slices), length)
        steps = []
        for start in range(0, length, cfg.batch_size):
            batch_a = torch.from_numpy(source_slices[order_a[start:start + cfg.batch_size]]).unsqueeze(1)
            batch_b = torch.from_numpy(target_slices[order_b[start:start + cfg.batch_size]]).unsqueeze(1)
            steps.append(cyclegan_step(batch_a, batch_b, models, pools, optimizers, cfg, lr))
        losses = LossComponents.mean(steps)
        result.history.append(EpochLosses(epoch, lr, losses))
        logger.info(
            'GAN epoch %d/%d lr=%.3g G=%.4f (adv=%.4f cyc=%.4f id=%.4f) D_A=%.4f D_B=%.4f',
            epoch, cfg.total_epochs, lr, losses.gen_total, losses.gen_adv, losses.gen_cyc,
            losses.gen_id, losses.disc_a, losses.disc_b,
        )
    return result


def translate_volume(vol: Volume3D, generator: ParamsModule, cfg: TranslationConfig) -> Volume3D:
    """
    Real source -> pseudo target: срезы, minmax, ресайз к slice_size,
    генератор, ресайз обратно и сборка. Интенсивности остаются в [-1, 1].
    """
    if getattr(generator, 'role', None) != GENERATOR:
        raise IncompatibleModelError(f'{type(generator).__name__} is not an image generator')
    if generator.hparams.get('in_channels', 1) != 1 or generator.hparams.get('out_channels', 1) != 1:
        raise IncompatibleModelError('generator must map one channel to one channel')
    nx, ny, nz = vol.shape
    normed, _ = normalize(vol, MINMAX)
    stack = resize_stack(slice_z(normed).as_array(), cfg.slice_size, cfg.slice_size).astype(np.float32)
    outputs = []
    with torch.no_grad():
        for start in range(0, nz, cfg.batch_size):
            batch = torch.from_numpy(stack[start:start + cfg.batch_size]).unsqueeze(1)
            outputs.append(generator(batch).squeeze(1).numpy().astype(np.float64))
    translated = resize_stack(np.concatenate(outputs, axis=0), nx, ny)
    return Volume3D(np.moveaxis(translated, 0, 2), vol.spacing, vol.origin)


def write_history(path: Path, history: Sequence[EpochLosses]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='') as fh:
        writer = csv.writer(fh, lineterminator='\n')
        writer.writerow(HISTORY_COLUMNS)
        for item in history:
            values = asdict(item.losses)
            writer.writerow([item.epoch] + [repr(values[c]) for c in HISTORY_COLUMNS[1:-1]] + [repr(item.lr)])
    return path


def save_cyclegan(path: Path, models: CycleGANModels) -> Path:
    path = Path(path)
    for name, model in models.items():
        save_checkpoint(path / name, model)
    return path


def load_generator(path: Path, direction: str = 'g_ab') -> ParamsModule:
    checkpoint = Path(path) / direction
    if not (checkpoint / 'manifest.txt').exists():
        raise MissingInputError(f'no trained generator at {checkpoint}')
    model, _ = load_checkpoint(checkpoint)
    if model.role != GENERATOR:
        raise IncompatibleModelError(f'{checkpoint} does not hold a generator')
    return model


def is_finite_history(history: Sequence[EpochLosses]) -> bool:
    return all(math.isfinite(item.losses.gen_total) for item in history)
