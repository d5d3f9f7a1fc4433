"""
Синтетические фантомы двух «модальностей» одной анатомии.

Домен A (source) соответствует контрастному T1: опухоль яркая на тёмном фоне.
Домен B (target) соответствует hrT2: контраст опухоли инвертирован, улитка
яркая, текстура ткани сильнее. Геометрия и метки зависят только от
(геометрии спецификации, case_seed), рендеринг меняет лишь интенсивности.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from .exceptions import PhantomGenerationError, PreconditionError
from .volumes import CaseEntry, DatasetManifest, LabelVolume, Volume3D, save_volume

logger = logging.getLogger(__name__)

# case_seed = master_seed * CASE_STRIDE + порядковый номер кейса
CASE_STRIDE = 1_000_000

# потоки SeedSequence: геометрия и рендеринг разных доменов независимы
_GEOMETRY_STREAM = 0
_DOMAIN_STREAMS = {'source': 1, 'target': 2}


@dataclass(frozen=True)
class ModalityMap:
    """Средние интенсивности классов и амплитуда текстуры ткани"""
    background: float
    tissue: float
    tumor: float
    cochlea: float
    texture: float


DOMAIN_A = ModalityMap(background=0.05, tissue=0.35, tumor=0.95, cochlea=0.55, texture=0.03)
DOMAIN_B = ModalityMap(background=0.10, tissue=0.70, tumor=0.25, cochlea=1.00, texture=0.10)


@dataclass(frozen=True)
class PhantomSpec:
    grid: Tuple[int, int, int] = (64, 64, 16)
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.5)
    head_radii: Tuple[float, float, float] = (28.0, 24.0, 7.0)
    tumor_radius: Tuple[float, float] = (5.0, 8.0)
    cochlea_radius: Tuple[float, float] = (2.0, 3.5)
    source_map: ModalityMap = field(default=DOMAIN_A)
    target_map: ModalityMap = field(default=DOMAIN_B)
    noise_sigma: float = 0.03
    bias_amplitude: float = 0.1
    contrast_gap: float = 0.3
    intensity_bounds: Tuple[float, float] = (0.0, 1.5)
    max_retries: int = 100

    def __post_init__(self):
        if any(n < 1 for n in self.grid):
            raise PreconditionError(f'grid must be positive, got {self.grid}')
        if any(s <= 0 for s in self.spacing):
            raise PreconditionError(f'spacing must be positive, got {self.spacing}')
        radii = list(self.head_radii) + list(self.tumor_radius) + list(self.cochlea_radius)
        if any(r < 1 for r in radii):
            raise PreconditionError('all radii must be at least 1 voxel')
        if self.tumor_radius[0] > self.tumor_radius[1] or self.cochlea_radius[0] > self.cochlea_radius[1]:
            raise PreconditionError('radius ranges must be (low, high)')
        if any(2 * r > n for r, n in zip(self.head_radii, self.grid)):
            raise PreconditionError(f'head radii {self.head_radii} do not fit into grid {self.grid}')
        footprint = 2 * (self.tumor_radius[1] + self.cochlea_radius[1]) + 1
        if footprint > 2 * min(self.head_radii[:2]):
            raise PreconditionError('tumor and cochlea do not fit inside the head in-plane')
        gap = abs(self.source_map.tumor - self.target_map.tumor)
        if gap < self.contrast_gap:
            raise PreconditionError(
                f'tumor contrast gap {gap:.3f} is below the configured {self.contrast_gap}'
            )
        low, high = self.intensity_bounds
        if not low < high:
            raise PreconditionError(f'invalid intensity bounds {self.intensity_bounds}')
        if self.noise_sigma < 0 or self.bias_amplitude < 0 or self.bias_amplitude >= 1:
            raise PreconditionError('noise sigma must be >= 0 and bias amplitude in [0, 1)')

    def modality(self, domain: str) -> ModalityMap:
        if domain == 'source':
            return self.source_map
        if domain == 'target':
            return self.target_map
        raise PreconditionError(f'unknown domain {domain!r}')


@dataclass(eq=False)
class CaseRecord:
    case_id: str
    domain: str
    case_seed: int
    image: Volume3D
    labels: LabelVolume


def _coordinates(spec: PhantomSpec):
    """Физические координаты центров вокселей (мм)"""
    axes = [np.arange(n, dtype=np.float64) * s for n, s in zip(spec.grid, spec.spacing)]
    return np.meshgrid(*axes, indexing='ij')


def _ball(coords, center, radius_mm):
    x, y, z = coords
    return ((x - center[0]) ** 2 + (y - center[1]) ** 2 + (z - center[2]) ** 2) <= radius_mm ** 2


def _place_structures(spec: PhantomSpec, case_seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Геометрия кейса: голова, опухоль (1) и прилегающая улитка (2)"""
    rng = np.random.default_rng([case_seed, _GEOMETRY_STREAM])
    coords = _coordinates(spec)
    x, y, z = coords
    extent = [(n - 1) * s for n, s in zip(spec.grid, spec.spacing)]
    head_center = [e / 2 for e in extent]
    head_radii_mm = [r * s for r, s in zip(spec.head_radii, spec.spacing)]
    head = (
        ((x - head_center[0]) / head_radii_mm[0]) ** 2
        + ((y - head_center[1]) / head_radii_mm[1]) ** 2
        + ((z - head_center[2]) / head_radii_mm[2]) ** 2
    ) <= 1.0

    in_plane = spec.spacing[0]
    for _ in range(spec.max_retries):
        tumor_r = rng.uniform(*spec.tumor_radius) * in_plane
        cochlea_r = rng.uniform(*spec.cochlea_radius) * in_plane
        tumor_center = [
            head_center[0] + rng.uniform(-0.5, 0.5) * head_radii_mm[0],
            head_center[1] + rng.uniform(-0.5, 0.5) * head_radii_mm[1],
            head_center[2] + rng.uniform(-0.25, 0.25) * head_radii_mm[2],
        ]
        angle = rng.uniform(0.0, 2 * math.pi)
        distance = tumor_r + cochlea_r + in_plane
        cochlea_center = [
            tumor_center[0] + distance * math.cos(angle),
            tumor_center[1] + distance * math.sin(angle),
            tumor_center[2],
        ]
        tumor = _ball(coords, tumor_center, tumor_r)
        cochlea = _ball(coords, cochlea_center, cochlea_r) & ~tumor
        if tumor.sum() < 8 or cochlea.sum() < 8:
            continue
        if np.any(tumor & ~head) or np.any(cochlea & ~head):
            continue
        labels = np.zeros(spec.grid, dtype=np.uint8)
        labels[tumor] = 1
        labels[cochlea] = 2
        return labels, head
    raise PhantomGenerationError(
        f'could not place structures for case seed {case_seed} after {spec.max_retries} attempts'
    )


def _smooth_field(rng, shape, sigma):
    values = gaussian_filter(rng.standard_normal(shape), sigma=sigma, mode='nearest')
    std = values.std()
    return values / std if std > 0 else values


def render(spec: PhantomSpec, labels: np.ndarray, head: np.ndarray, case_seed: int, domain: str) -> np.ndarray:
    """Интенсивности домена по готовой геометрии"""
    modality = spec.modality(domain)
    rng = np.random.default_rng([case_seed, _DOMAIN_STREAMS[domain]])
    image = np.full(spec.grid, modality.background, dtype=np.float64)
    image[head] = modality.tissue
    texture = _smooth_field(rng, spec.grid, sigma=1.5)
    tissue = head & (labels == 0)
    image[tissue] += modality.texture * texture[tissue]
    image[labels == 1] = modality.tumor
    image[labels == 2] = modality.cochlea

    bias = _smooth_field(rng, spec.grid, sigma=max(spec.grid) / 4)
    peak = np.abs(bias).max()
    if peak > 0:
        bias = bias / peak
    image *= 1.0 + spec.bias_amplitude * bias
    image += rng.normal(0.0, spec.noise_sigma, size=spec.grid)
    return np.clip(image, *spec.intensity_bounds).astype(np.float32)


def gen_case(spec: PhantomSpec, case_seed: int, domain: str, case_id: Optional[str] = None) -> CaseRecord:
    """Один кейс; детерминирован по (spec, case_seed, domain)"""
    labels, head = _place_structures(spec, case_seed)
    image = render(spec, labels, head, case_seed, domain)
    return CaseRecord(
        case_id=case_id or f'{domain}-{case_seed}',
        domain=domain,
        case_seed=case_seed,
        image=Volume3D(image, spec.spacing),
        labels=LabelVolume(labels, spec.spacing),
    )


def cohort_seeds(master_seed: int, n_source: int, n_target: int):
    """Непересекающиеся диапазоны case_seed для source и target"""
    if n_source + n_target >= CASE_STRIDE:
        raise PreconditionError(f'at most {CASE_STRIDE - 1} cases per dataset')
    base = master_seed * CASE_STRIDE
    source = [base + i for i in range(n_source)]
    target = [base + n_source + i for i in range(n_target)]
    return source, target


def gen_dataset(spec: PhantomSpec, n_source: int, n_target_train: int, n_target_eval: int,
                master_seed: int, out_dir: Path, threads: int = 1) -> DatasetManifest:
    """
    Генерация датасета на диск.

    Метки target-кейсов пишутся только в карантинный каталог
    `quarantine/labels/` со своим манифестом; основной манифест их не содержит.
    """
    if n_source < 1 or n_target_train < 1 or n_target_eval < 1:
        raise PreconditionError('n_source, n_target_train and n_target_eval must be >= 1')
    out_dir = Path(out_dir)
    quarantine = out_dir / 'quarantine'
    source_seeds, target_seeds = cohort_seeds(master_seed, n_source, n_target_train + n_target_eval)

    jobs = [(f'source-{i:03d}', seed, 'source', 'train') for i, seed in enumerate(source_seeds)]
    for i, seed in enumerate(target_seeds):
        split = 'train' if i < n_target_train else 'eval'
        index = i if split == 'train' else i - n_target_train
        jobs.append((f'target-{split}-{index:03d}', seed, 'target', split))

    def build(job):
        case_id, seed, domain, _ = job
        return gen_case(spec, seed, domain, case_id=case_id)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        records = list(pool.map(build, jobs))

    manifest = DatasetManifest(root=out_dir)
    sealed = DatasetManifest(root=quarantine)
    for (case_id, _, domain, split), record in zip(jobs, records):
        image_rel = f'images/{case_id}.nii'
        save_volume(out_dir / image_rel, record.image)
        if domain == 'source':
            label_rel = f'labels/{case_id}.nii'
            save_volume(out_dir / label_rel, record.labels)
            manifest.entries.append(CaseEntry(case_id, domain, split, image_rel, label_rel))
        else:
            save_volume(quarantine / 'labels' / f'{case_id}.nii', record.labels)
            manifest.entries.append(CaseEntry(case_id, domain, split, image_rel, None))
            sealed.entries.append(
                CaseEntry(case_id, domain, split, f'../{image_rel}', f'labels/{case_id}.nii')
            )

    manifest.write(out_dir / 'manifest.tsv')
    sealed.write(quarantine / 'manifest.tsv')
    logger.info('Generated %d source and %d target cases in %s',
                n_source, n_target_train + n_target_eval, out_dir)
    return manifest
