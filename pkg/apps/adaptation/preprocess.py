"""
Путь данных для трансляции: нарезка по z, бикубический ресемплинг срезов,
нормализация интенсивностей и обратная сборка объёма.
"""

from dataclasses import dataclass
from functools import lru_cache
from typing import List, Tuple

import numpy as np

from .exceptions import DimensionMismatchError, PreconditionError
from .volumes import Volume3D

MINMAX = 'minmax'
ZSCORE = 'zscore'

# Catmull-Rom
KEYS_A = -0.5


@dataclass(eq=False)
class SliceStack:
    """Упорядоченные 2D-срезы объёма (каждый nx × ny)"""
    slices: List[np.ndarray]
    dims: Tuple[int, int, int]
    spacing: Tuple[float, float, float]

    def __post_init__(self):
        if len(self.slices) != self.dims[2]:
            raise DimensionMismatchError(
                f'stack holds {len(self.slices)} slices, dims say nz={self.dims[2]}'
            )

    def __len__(self):
        return len(self.slices)

    def as_array(self) -> np.ndarray:
        """(nz, h, w)"""
        return np.stack(self.slices, axis=0)


@dataclass(frozen=True)
class NormParams:
    mode: str
    first: float  # min или mean
    second: float  # max или std
    degenerate: bool = False

    def __post_init__(self):
        if self.mode == MINMAX and self.second < self.first:
            raise PreconditionError('minmax params need max >= min')
        if self.mode == ZSCORE and self.second < 0:
            raise PreconditionError('zscore params need std >= 0')
        if self.mode not in (MINMAX, ZSCORE):
            raise PreconditionError(f'unknown normalization mode {self.mode!r}')


def slice_z(vol: Volume3D) -> SliceStack:
    slices = [vol.voxels[:, :, k].copy() for k in range(vol.shape[2])]
    return SliceStack(slices=slices, dims=vol.shape, spacing=vol.spacing)


def keys_kernel(t: np.ndarray, a: float = KEYS_A) -> np.ndarray:
    """Кубическое ядро свёртки Keys"""
    t = np.abs(t)
    t2 = t * t
    t3 = t2 * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


@lru_cache(maxsize=64)
def _weight_matrix(n_in: int, n_out: int) -> np.ndarray:
    """
    Матрица (n_out, n_in) одномерной бикубической интерполяции.

    Центр выхода u отображается в координату входа (u + 0.5)·scale − 0.5,
    индексы отсчётов за краем прижимаются к допустимому диапазону.
    """
    scale = n_in / n_out
    weights = np.zeros((n_out, n_in), dtype=np.float64)
    for u in range(n_out):
        x = (u + 0.5) * scale - 0.5
        base = int(np.floor(x))
        for tap in range(base - 1, base + 3):
            w = float(keys_kernel(np.array(x - tap)))
            weights[u, min(max(tap, 0), n_in - 1)] += w
    weights.setflags(write=False)
    return weights


def resize_bicubic(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Бикубический ресайз 2D-изображения (раздельно по осям, в float64)"""
    if out_h < 1 or out_w < 1:
        raise PreconditionError(f'output size must be >= 1, got {out_h}x{out_w}')
    img = np.asarray(img)
    if img.ndim != 2:
        raise DimensionMismatchError(f'expected a 2D image, got shape {img.shape}')
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.astype(np.float64)
    rows = _weight_matrix(h, out_h)
    cols = _weight_matrix(w, out_w)
    return rows @ img.astype(np.float64) @ cols.T


def resize_stack(images: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """То же для пачки (n, h, w)"""
    images = np.asarray(images, dtype=np.float64)
    if images.shape[1:] == (out_h, out_w):
        return images.copy()
    rows = _weight_matrix(images.shape[1], out_h)
    cols = _weight_matrix(images.shape[2], out_w)
    return np.einsum('uh,nhw,vw->nuv', rows, images, cols)


def normalize(vol: Volume3D, mode: str = MINMAX) -> Tuple[Volume3D, NormParams]:
    """
    minmax: [min, max] -> [-1, 1]; zscore: среднее 0, std 1.
    Постоянный объём переводится в нули с флагом degenerate.
    """
    values = vol.voxels.astype(np.float64)
    if mode == MINMAX:
        low, high = float(values.min()), float(values.max())
        if high == low:
            return vol.with_voxels(np.zeros_like(values)), NormParams(mode, low, high, degenerate=True)
        scaled = 2.0 * (values - low) / (high - low) - 1.0
        return vol.with_voxels(scaled), NormParams(mode, low, high)
    if mode == ZSCORE:
        mean, std = float(values.mean()), float(values.std())
        if std == 0:
            return vol.with_voxels(np.zeros_like(values)), NormParams(mode, mean, std, degenerate=True)
        return vol.with_voxels((values - mean) / std), NormParams(mode, mean, std)
    raise PreconditionError(f'unknown normalization mode {mode!r}')


def denormalize(vol: Volume3D, params: NormParams) -> Volume3D:
    values = vol.voxels.astype(np.float64)
    if params.mode == MINMAX:
        if params.degenerate:
            return vol.with_voxels(np.full_like(values, params.first))
        restored = (values + 1.0) / 2.0 * (params.second - params.first) + params.first
        return vol.with_voxels(restored)
    if params.degenerate:
        return vol.with_voxels(np.full_like(values, params.first))
    return vol.with_voxels(values * params.second + params.first)


def reassemble(stack: SliceStack, dims: Tuple[int, int, int],
               spacing: Tuple[float, float, float], origin=(0.0, 0.0, 0.0)) -> Volume3D:
    """Срезы -> объём dims; срезы другого размера ресайзятся бикубически"""
    nx, ny, nz = dims
    if len(stack.slices) != nz:
        raise DimensionMismatchError(f'stack has {len(stack.slices)} slices, target nz={nz}')
    planes = []
    for image in stack.slices:
        if image.shape != (nx, ny):
            image = resize_bicubic(image, nx, ny)
        planes.append(image)
    return Volume3D(np.stack(planes, axis=2), spacing, origin)
