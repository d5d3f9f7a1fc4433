"""
Обучаемые модели: ResNet- и U-Net-генераторы, PatchGAN-дискриминатор и
3D U-Net сегментатор. Каждая модель знает свой тег архитектуры, seed
инициализации и гиперпараметры, по которым её можно пересобрать из чекпоинта.
"""

import math
from typing import Dict, List, Sequence, Tuple

import torch
import torch.nn as nn

from .exceptions import ArchitectureError, ShapeMismatchError

GENERATOR = 'generator'
DISCRIMINATOR = 'discriminator'
SEGMENTER = 'segmenter'

# бутылочное горлышко InstanceNorm должно содержать больше одного элемента
MIN_RESNET_SIDE = 8


def patchgan_receptive_field(n_layers: int) -> int:
    field = 4
    for _ in range(n_layers):
        field = field * 2 + 2
    return field


class ParamsModule(nn.Module):
    """Базовый класс моделей с манифестом форм параметров"""
    arch = None
    role = None

    def __init__(self, seed: int, **hparams):
        super().__init__()
        self.seed = int(seed)
        self.hparams = dict(hparams)

    def shape_manifest(self) -> List[Tuple[str, Tuple[int, ...]]]:
        return [(name, tuple(p.shape)) for name, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(math.prod(shape) for _, shape in self.shape_manifest())

    def reset_parameters(self):
        """Детерминированная инициализация от self.seed: свёртки ~ N(0, std), нормировки 1/0"""
        gen = torch.Generator().manual_seed(self.seed)
        with torch.no_grad():
            for module in self.modules():
                if isinstance(module, (nn.Conv2d, nn.Conv3d, nn.ConvTranspose2d, nn.ConvTranspose3d)):
                    module.weight.normal_(0.0, self.init_std(module), generator=gen)
                    if module.bias is not None:
                        module.bias.zero_()
                elif isinstance(module, (nn.InstanceNorm2d, nn.InstanceNorm3d)) and module.affine:
                    module.weight.fill_(1.0)
                    module.bias.zero_()

    def init_std(self, module) -> float:
        return 0.02


# --------------------------------------------------------------------------
# ResNet-генератор
# --------------------------------------------------------------------------

class ResidualBlock(nn.Module):
    def __init__(self, features: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(features, features, kernel_size=3),
            nn.InstanceNorm2d(features),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(features, features, kernel_size=3),
            nn.InstanceNorm2d(features),
        )

    def forward(self, x):
        return x + self.block(x)


class ResnetGenerator(ParamsModule):
    """7×7 stem, два stride-2 даунсэмплинга, остаточные блоки, два апсэмплинга, 7×7 + tanh"""
    arch = 'resnet_generator'
    role = GENERATOR

    def __init__(self, base_width=64, n_res_blocks=9, in_channels=1, out_channels=1, seed=0):
        super().__init__(seed, base_width=base_width, n_res_blocks=n_res_blocks,
                         in_channels=in_channels, out_channels=out_channels)
        width = base_width
        layers = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(in_channels, width, kernel_size=7),
            nn.InstanceNorm2d(width),
            nn.ReLU(inplace=True),
        ]
        for _ in range(2):
            layers += [
                nn.Conv2d(width, width * 2, kernel_size=3, stride=2, padding=1),
                nn.InstanceNorm2d(width * 2),
                nn.ReLU(inplace=True),
            ]
            width *= 2
        layers += [ResidualBlock(width) for _ in range(n_res_blocks)]
        for _ in range(2):
            layers += [
                nn.ConvTranspose2d(width, width // 2, kernel_size=3, stride=2, padding=1, output_padding=1),
                nn.InstanceNorm2d(width // 2),
                nn.ReLU(inplace=True),
            ]
            width //= 2
        layers += [
            nn.ReflectionPad2d(3),
            nn.Conv2d(width, out_channels, kernel_size=7),
            nn.Tanh(),
        ]
        self.model = nn.Sequential(*layers)
        self.reset_parameters()

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % 4 or w % 4 or min(h, w) < MIN_RESNET_SIDE:
            raise ShapeMismatchError(
                f'resnet generator needs sides divisible by 4 and at least {MIN_RESNET_SIDE}, got {h}x{w}'
            )
        return self.model(x)


# --------------------------------------------------------------------------
# U-Net-генератор
# --------------------------------------------------------------------------

class UnetGenerator(ParamsModule):
    """Энкодер-декодер со skip-соединениями, тот же I/O-контракт, что у ResNet"""
    arch = 'unet_generator'
    role = GENERATOR

    def __init__(self, base_width=64, n_down=8, in_channels=1, out_channels=1, seed=0):
        super().__init__(seed, base_width=base_width, n_down=n_down,
                         in_channels=in_channels, out_channels=out_channels)
        self.n_down = n_down
        widths = [min(base_width * 2 ** i, base_width * 8) for i in range(n_down)]
        self.down = nn.ModuleList()
        previous = in_channels
        for level, width in enumerate(widths):
            layers = []
            if level > 0:
                layers.append(nn.LeakyReLU(0.2, inplace=False))
            layers.append(nn.Conv2d(previous, width, kernel_size=4, stride=2, padding=1))
            if 0 < level < n_down - 1:
                layers.append(nn.InstanceNorm2d(width))
            self.down.append(nn.Sequential(*layers))
            previous = width

        # вход уровня декодера = выход уровня ниже + skip с энкодера
        self.up = nn.ModuleList()
        for level in reversed(range(n_down)):
            up_in = widths[level] if level == n_down - 1 else widths[level] * 2
            if level == 0:
                layers = [
                    nn.ReLU(inplace=False),
                    nn.ConvTranspose2d(up_in, out_channels, kernel_size=4, stride=2, padding=1),
                    nn.Tanh(),
                ]
            else:
                layers = [
                    nn.ReLU(inplace=False),
                    nn.ConvTranspose2d(up_in, widths[level - 1], kernel_size=4, stride=2, padding=1),
                    nn.InstanceNorm2d(widths[level - 1]),
                ]
            self.up.append(nn.Sequential(*layers))
        self.reset_parameters()

    def forward(self, x):
        h, w = x.shape[-2:]
        factor = 2 ** self.n_down
        if h % factor or w % factor or h < factor or w < factor:
            raise ShapeMismatchError(
                f'unet generator with {self.n_down} levels needs sides divisible by {factor} '
                f'and at least {factor}, got {h}x{w}'
            )
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
        x = skips.pop()
        for i, block in enumerate(self.up):
            if i > 0:
                x = torch.cat([x, skips.pop()], dim=1)
            x = block(x)
        return x


# --------------------------------------------------------------------------
# PatchGAN-дискриминатор
# --------------------------------------------------------------------------

class PatchDiscriminator(ParamsModule):
    """Стек stride-2 свёрток 4×4 с карой оценок по патчам (без глобального пулинга)"""
    arch = 'patchgan_discriminator'
    role = DISCRIMINATOR

    def __init__(self, base_width=64, n_layers=4, in_channels=1, seed=0):
        super().__init__(seed, base_width=base_width, n_layers=n_layers, in_channels=in_channels)
        self.n_layers = n_layers
        layers = []
        previous = in_channels
        for level in range(n_layers):
            width = base_width * 2 ** min(level, 3)
            layers.append(nn.Conv2d(previous, width, kernel_size=4, stride=2, padding=1))
            if level > 0:
                layers.append(nn.InstanceNorm2d(width))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
            previous = width
        layers += [
            nn.ZeroPad2d((1, 0, 1, 0)),
            nn.Conv2d(previous, 1, kernel_size=4, padding=1),
        ]
        self.model = nn.Sequential(*layers)
        self.reset_parameters()

    @property
    def receptive_field(self) -> int:
        return patchgan_receptive_field(self.n_layers)

    def score_shape(self, h: int, w: int) -> Tuple[int, int]:
        factor = 2 ** self.n_layers
        return h // factor, w // factor

    def forward(self, x):
        h, w = x.shape[-2:]
        if min(h, w) < self.receptive_field:
            raise ShapeMismatchError(
                f'input {h}x{w} is smaller than the discriminator receptive field {self.receptive_field}'
            )
        return self.model(x)


# --------------------------------------------------------------------------
# 3D U-Net сегментатор
# --------------------------------------------------------------------------

def _conv_block_3d(in_channels, out_channels, stride=1):
    return nn.Sequential(
        nn.Conv3d(in_channels, out_channels, kernel_size=3, stride=stride, padding=1),
        nn.InstanceNorm3d(out_channels, affine=True),
        nn.LeakyReLU(0.01, inplace=True),
        nn.Conv3d(out_channels, out_channels, kernel_size=3, padding=1),
        nn.InstanceNorm3d(out_channels, affine=True),
        nn.LeakyReLU(0.01, inplace=True),
    )


class Segmenter3D(ParamsModule):
    """3D U-Net: на выходе логиты по n_classes для каждого вокселя"""
    arch = 'unet3d_segmenter'
    role = SEGMENTER

    def __init__(self, base_width=16, depth=3, n_classes=3, in_channels=1,
                 patch_size=(64, 64, 16), seed=0):
        super().__init__(seed, base_width=base_width, depth=depth, n_classes=n_classes,
                         in_channels=in_channels, patch_size=list(patch_size))
        self.depth = depth
        self.n_classes = n_classes
        self.patch_size = tuple(int(p) for p in patch_size)
        widths = [min(base_width * 2 ** level, 320) for level in range(depth + 1)]
        self.encoder = nn.ModuleList([_conv_block_3d(in_channels, widths[0])])
        for level in range(1, depth + 1):
            self.encoder.append(_conv_block_3d(widths[level - 1], widths[level], stride=2))
        self.upsample = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for level in reversed(range(depth)):
            self.upsample.append(nn.ConvTranspose3d(widths[level + 1], widths[level], kernel_size=2, stride=2))
            self.decoder.append(_conv_block_3d(widths[level] * 2, widths[level]))
        self.head = nn.Conv3d(widths[0], n_classes, kernel_size=1)
        self.reset_parameters()

    def init_std(self, module) -> float:
        # He-инициализация для leaky ReLU
        fan_in = module.weight[0].numel() if not isinstance(module, nn.ConvTranspose3d) \
            else module.weight.shape[1] * module.weight[0, 0].numel()
        gain = math.sqrt(2.0 / (1 + 0.01 ** 2))
        return gain / math.sqrt(fan_in)

    def check_input(self, shape: Sequence[int]):
        factor = 2 ** self.depth
        if any(s % factor or s < 2 * factor for s in shape):
            raise ShapeMismatchError(
                f'segmenter of depth {self.depth} needs sides divisible by {factor} and at least {2 * factor}, '
                f'got {tuple(shape)}'
            )

    def forward(self, x):
        self.check_input(x.shape[-3:])
        skips = []
        for block in self.encoder:
            x = block(x)
            skips.append(x)
        x = skips.pop()
        for up, block in zip(self.upsample, self.decoder):
            x = up(x)
            x = block(torch.cat([x, skips.pop()], dim=1))
        return self.head(x)


# --------------------------------------------------------------------------
# Сборка моделей
# --------------------------------------------------------------------------

def _require_positive(**values):
    for name, value in values.items():
        if int(value) < 1:
            raise ArchitectureError(f'{name} must be >= 1, got {value}')


def build_resnet_generator(base_width=64, n_res_blocks=9, in_channels=1, out_channels=1, seed=0) -> ResnetGenerator:
    _require_positive(base_width=base_width, in_channels=in_channels, out_channels=out_channels)
    if n_res_blocks < 0:
        raise ArchitectureError(f'n_res_blocks must be >= 0, got {n_res_blocks}')
    return ResnetGenerator(base_width, n_res_blocks, in_channels, out_channels, seed)


def build_unet_generator(base_width=64, n_down=8, in_channels=1, out_channels=1, seed=0) -> UnetGenerator:
    _require_positive(base_width=base_width, in_channels=in_channels, out_channels=out_channels)
    if n_down < 2:
        raise ArchitectureError(f'n_down must be >= 2, got {n_down}')
    return UnetGenerator(base_width, n_down, in_channels, out_channels, seed)


def build_patchgan_discriminator(base_width=64, n_layers=4, in_channels=1, seed=0) -> PatchDiscriminator:
    _require_positive(base_width=base_width, n_layers=n_layers, in_channels=in_channels)
    return PatchDiscriminator(base_width, n_layers, in_channels, seed)


def build_segmenter_3d(base_width=16, depth=3, n_classes=3, in_channels=1,
                       patch_size=(64, 64, 16), seed=0) -> Segmenter3D:
    _require_positive(base_width=base_width, depth=depth, n_classes=n_classes, in_channels=in_channels)
    if n_classes < 2:
        raise ArchitectureError('segmenter needs at least 2 classes')
    factor = 2 ** depth
    if len(patch_size) != 3 or any(int(p) < 2 * factor or int(p) % factor for p in patch_size):
        raise ArchitectureError(
            f'patch size {tuple(patch_size)} must be divisible by 2^{depth}={factor} and at least {2 * factor}'
        )
    return Segmenter3D(base_width, depth, n_classes, in_channels, patch_size, seed)


BUILDERS = {
    ResnetGenerator.arch: build_resnet_generator,
    UnetGenerator.arch: build_unet_generator,
    PatchDiscriminator.arch: build_patchgan_discriminator,
    Segmenter3D.arch: build_segmenter_3d,
}

GENERATOR_ARCHS = {'resnet': ResnetGenerator.arch, 'unet': UnetGenerator.arch}


def build_model(arch: str, hparams: Dict, seed: int) -> ParamsModule:
    if arch not in BUILDERS:
        raise ArchitectureError(f'unknown architecture {arch!r}')
    return BUILDERS[arch](seed=seed, **hparams)
