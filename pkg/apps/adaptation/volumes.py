"""
Объёмы, карты меток и их хранение: подмножество NIfTI-1 (один файл .nii,
без сжатия) и текстовый манифест датасета.
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Tuple, Union

import numpy as np

from .exceptions import (
    InvalidVolumeError, ManifestError, NiftiFormatError, NiftiTruncatedError,
    NiftiUnsupportedError,
)

logger = logging.getLogger(__name__)

CLASSES = (0, 1, 2)
DOMAINS = ('source', 'target')
SPLITS = ('train', 'eval')

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC_SINGLE = b'n+1\x00'
MAGIC_PAIR = b'ni1\x00'

# datatype code -> numpy dtype (без порядка байт)
NIFTI_DTYPES = {
    2: np.dtype('u1'),
    4: np.dtype('i2'),
    16: np.dtype('f4'),
    64: np.dtype('f8'),
}

HEADER_DTD = [
    ('sizeof_hdr', 'i4'),      # 0; must be 348
    ('data_type', 'S10'),      # 4; unused
    ('db_name', 'S18'),        # 14; unused
    ('extents', 'i4'),         # 32; unused
    ('session_error', 'i2'),   # 36; unused
    ('regular', 'S1'),         # 38; unused
    ('dim_info', 'u1'),        # 39
    ('dim', 'i2', (8,)),       # 40
    ('intent_p1', 'f4'),       # 56
    ('intent_p2', 'f4'),       # 60
    ('intent_p3', 'f4'),       # 64
    ('intent_code', 'i2'),     # 68
    ('datatype', 'i2'),        # 70
    ('bitpix', 'i2'),          # 72
    ('slice_start', 'i2'),     # 74
    ('pixdim', 'f4', (8,)),    # 76
    ('vox_offset', 'f4'),      # 108
    ('scl_slope', 'f4'),       # 112
    ('scl_inter', 'f4'),       # 116
    ('slice_end', 'i2'),       # 120
    ('slice_code', 'u1'),      # 122
    ('xyzt_units', 'u1'),      # 123
    ('cal_max', 'f4'),         # 124
    ('cal_min', 'f4'),         # 128
    ('slice_duration', 'f4'),  # 132
    ('toffset', 'f4'),         # 136
    ('glmax', 'i4'),           # 140
    ('glmin', 'i4'),           # 144
    ('descrip', 'S80'),        # 148
    ('aux_file', 'S24'),       # 228
    ('qform_code', 'i2'),      # 252
    ('sform_code', 'i2'),      # 254
    ('quatern_b', 'f4'),       # 256
    ('quatern_c', 'f4'),       # 260
    ('quatern_d', 'f4'),       # 264
    ('qoffset_x', 'f4'),       # 268
    ('qoffset_y', 'f4'),       # 272
    ('qoffset_z', 'f4'),       # 276
    ('srow_x', 'f4', (4,)),    # 280
    ('srow_y', 'f4', (4,)),    # 296
    ('srow_z', 'f4', (4,)),    # 312
    ('intent_name', 'S16'),    # 328
    ('magic', 'S4'),           # 344
]
HEADER_DTYPE = np.dtype(HEADER_DTD)
assert HEADER_DTYPE.itemsize == HEADER_SIZE


def _as_f32_triple(values, name) -> Tuple[float, float, float]:
    """Приводим тройку к значениям, точно представимым во float32."""
    values = tuple(values)
    if len(values) != 3:
        raise InvalidVolumeError(f'{name} must have 3 components, got {len(values)}')
    return tuple(float(np.float32(v)) for v in values)


@dataclass(eq=False)
class Volume3D:
    """Скалярная воксельная сетка (nx, ny, nz) с шагом и началом в мм"""
    voxels: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        voxels = np.asarray(self.voxels)
        if voxels.ndim != 3 or min(voxels.shape) < 1:
            raise InvalidVolumeError(f'volume must be a non-empty 3D grid, got shape {voxels.shape}')
        voxels = voxels.astype(np.float32, copy=False)
        if not np.all(np.isfinite(voxels)):
            raise InvalidVolumeError('volume contains non-finite voxels')
        self.voxels = voxels
        self.spacing = _as_f32_triple(self.spacing, 'spacing')
        self.origin = _as_f32_triple(self.origin, 'origin')
        if not all(s > 0 and math.isfinite(s) for s in self.spacing):
            raise InvalidVolumeError(f'spacing must be positive, got {self.spacing}')
        if not all(math.isfinite(o) for o in self.origin):
            raise InvalidVolumeError(f'origin must be finite, got {self.origin}')

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(int(n) for n in self.voxels.shape)

    def physical_point(self, i, j, k) -> Tuple[float, float, float]:
        return tuple(o + idx * s for o, idx, s in zip(self.origin, (i, j, k), self.spacing))

    def with_voxels(self, voxels: np.ndarray) -> 'Volume3D':
        return Volume3D(voxels, self.spacing, self.origin)

    def __eq__(self, other):
        if not isinstance(other, Volume3D):
            return NotImplemented
        return (self.shape == other.shape and self.spacing == other.spacing
                and self.origin == other.origin
                and np.array_equal(self.voxels, other.voxels))

    __hash__ = None


@dataclass(eq=False)
class LabelVolume:
    """Карта классов, выровненная с Volume3D"""
    labels: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    classes: Tuple[int, ...] = field(default=CLASSES)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3 or min(labels.shape) < 1:
            raise InvalidVolumeError(f'label volume must be a non-empty 3D grid, got shape {labels.shape}')
        if labels.dtype.kind == 'f':
            if not np.all(np.isfinite(labels)) or not np.array_equal(labels, np.round(labels)):
                raise InvalidVolumeError('label volume contains non-integer values')
        self.classes = tuple(int(c) for c in self.classes)
        if max(self.classes) > 255 or min(self.classes) < 0:
            raise InvalidVolumeError('label classes must fit into u8')
        labels = labels.astype(np.uint8) if labels.size and labels.min() >= 0 and labels.max() <= 255 \
            else labels.astype(np.int64)
        present = np.unique(labels)
        unknown = set(present.tolist()) - set(self.classes)
        if unknown:
            raise InvalidVolumeError(f'label values {sorted(unknown)} are not in classes {self.classes}')
        self.labels = labels
        self.spacing = _as_f32_triple(self.spacing, 'spacing')
        self.origin = _as_f32_triple(self.origin, 'origin')
        if not all(s > 0 and math.isfinite(s) for s in self.spacing):
            raise InvalidVolumeError(f'spacing must be positive, got {self.spacing}')

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(int(n) for n in self.labels.shape)

    def mask(self, cls: int) -> np.ndarray:
        return self.labels == cls

    def matches(self, vol: Volume3D) -> bool:
        """Совпадают ли сетка и шаг с объёмом"""
        return self.shape == vol.shape and self.spacing == vol.spacing

    def __eq__(self, other):
        if not isinstance(other, LabelVolume):
            return NotImplemented
        return (self.shape == other.shape and self.spacing == other.spacing
                and self.origin == other.origin and self.classes == other.classes
                and np.array_equal(self.labels, other.labels))

    __hash__ = None


# --------------------------------------------------------------------------
# NIfTI-1
# --------------------------------------------------------------------------

def _guess_byte_order(raw_header: bytes) -> str:
    """Порядок байт определяется по dim[0] ∈ [1, 7]"""
    for order in ('<', '>'):
        dim0 = int(np.frombuffer(raw_header, dtype=np.dtype(order + 'i2'), count=1, offset=40)[0])
        if 1 <= dim0 <= 7:
            return order
    raise NiftiFormatError('cannot determine byte order: dim[0] is outside [1, 7] in both orders')


def read_nifti(data: bytes, classes: Iterable[int] = CLASSES) -> Union[Volume3D, LabelVolume]:
    """
    Разбор однофайлового NIfTI-1.

    u8 без масштабирования со значениями из `classes` возвращается как
    LabelVolume, всё остальное как Volume3D (float32).
    """
    data = bytes(data)
    if len(data) < HEADER_SIZE:
        raise NiftiTruncatedError(f'header needs {HEADER_SIZE} bytes, got {len(data)}')

    raw_header = data[:HEADER_SIZE]
    magic = raw_header[344:348]
    if magic not in (MAGIC_SINGLE, MAGIC_PAIR):
        raise NiftiFormatError(f'bad magic {magic!r}')

    order = _guess_byte_order(raw_header)
    hdr = np.frombuffer(raw_header, dtype=HEADER_DTYPE.newbyteorder(order), count=1)[0]

    if int(hdr['sizeof_hdr']) != HEADER_SIZE:
        raise NiftiFormatError(f'sizeof_hdr is {int(hdr["sizeof_hdr"])}, expected {HEADER_SIZE}')

    ndim = int(hdr['dim'][0])
    dims = [int(d) for d in hdr['dim'][1:ndim + 1]]
    if any(d < 1 for d in dims):
        raise NiftiFormatError(f'non-positive dimension in {dims}')
    if any(d != 1 for d in dims[3:]):
        raise NiftiUnsupportedError(f'only 3D images are supported, got dims {dims}')
    dims = (dims + [1, 1, 1])[:3]

    code = int(hdr['datatype'])
    if code not in NIFTI_DTYPES:
        raise NiftiUnsupportedError(f'unsupported datatype code {code}')
    dtype = NIFTI_DTYPES[code].newbyteorder(order)

    vox_offset = float(hdr['vox_offset'])
    if not math.isfinite(vox_offset) or vox_offset < 0 or vox_offset != int(vox_offset):
        raise NiftiFormatError(f'invalid vox_offset {vox_offset}')
    offset = int(vox_offset)
    if magic == MAGIC_SINGLE and offset < HEADER_SIZE:
        raise NiftiFormatError(f'vox_offset {offset} points into the header')

    spacing = []
    for axis in range(3):
        value = float(hdr['pixdim'][axis + 1])
        if axis < ndim:
            if not math.isfinite(value) or value <= 0:
                raise NiftiFormatError(f'pixdim[{axis + 1}] must be positive, got {value}')
            spacing.append(value)
        else:
            spacing.append(1.0)

    count = dims[0] * dims[1] * dims[2]
    needed = offset + count * dtype.itemsize
    if len(data) < needed:
        raise NiftiTruncatedError(
            f'payload needs {count} samples after offset {offset}, file has {len(data)} bytes'
        )

    raw = np.frombuffer(data, dtype=dtype, count=count, offset=offset).reshape(dims, order='F')

    slope = float(hdr['scl_slope'])
    inter = float(hdr['scl_inter'])
    if slope == 0 or not math.isfinite(slope):
        slope = 1.0
    if not math.isfinite(inter):
        inter = 0.0

    origin = []
    for key in ('qoffset_x', 'qoffset_y', 'qoffset_z'):
        value = float(hdr[key])
        origin.append(value if math.isfinite(value) else 0.0)

    classes = tuple(classes)
    if code == 2 and slope == 1.0 and inter == 0.0:
        values = set(np.unique(raw).tolist())
        if values <= set(classes):
            return LabelVolume(raw.astype(np.uint8), tuple(spacing), tuple(origin), classes)

    with np.errstate(over='ignore', invalid='ignore'):
        values = (raw.astype(np.float64) * slope + inter).astype(np.float32)
    if not np.all(np.isfinite(values)):
        raise NiftiFormatError('scaled voxel values are not finite')
    return Volume3D(values, tuple(spacing), tuple(origin))


def _build_header(shape, spacing, origin, code: int) -> np.ndarray:
    hdr = np.zeros((), dtype=HEADER_DTYPE.newbyteorder('<'))
    hdr['sizeof_hdr'] = HEADER_SIZE
    hdr['dim'] = [3, shape[0], shape[1], shape[2], 1, 1, 1, 1]
    hdr['datatype'] = code
    hdr['bitpix'] = NIFTI_DTYPES[code].itemsize * 8
    hdr['pixdim'] = [1.0, spacing[0], spacing[1], spacing[2], 0, 0, 0, 0]
    hdr['vox_offset'] = VOX_OFFSET
    hdr['scl_slope'] = 1.0
    hdr['scl_inter'] = 0.0
    hdr['xyzt_units'] = 2  # mm
    hdr['qoffset_x'], hdr['qoffset_y'], hdr['qoffset_z'] = origin
    hdr['magic'] = MAGIC_SINGLE
    return hdr


def write_nifti(vol: Volume3D) -> bytes:
    """Volume3D -> байты NIfTI-1 (float32, little-endian, vox_offset=352)"""
    hdr = _build_header(vol.shape, vol.spacing, vol.origin, 16)
    payload = np.asarray(vol.voxels, dtype='<f4').tobytes(order='F')
    return hdr.tobytes() + b'\x00' * (VOX_OFFSET - HEADER_SIZE) + payload


def write_label_nifti(lv: LabelVolume) -> bytes:
    """LabelVolume -> байты NIfTI-1 (u8)"""
    hdr = _build_header(lv.shape, lv.spacing, lv.origin, 2)
    payload = np.asarray(lv.labels, dtype='u1').tobytes(order='F')
    return hdr.tobytes() + b'\x00' * (VOX_OFFSET - HEADER_SIZE) + payload


def save_volume(path: Path, vol: Union[Volume3D, LabelVolume]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = write_label_nifti(vol) if isinstance(vol, LabelVolume) else write_nifti(vol)
    path.write_bytes(data)
    return path


def load_volume(path: Path) -> Volume3D:
    """Загрузка изображения; u8-карты тоже приводятся к Volume3D"""
    result = read_nifti(Path(path).read_bytes())
    if isinstance(result, LabelVolume):
        return Volume3D(result.labels.astype(np.float32), result.spacing, result.origin)
    return result


def load_labels(path: Path, classes: Iterable[int] = CLASSES) -> LabelVolume:
    result = read_nifti(Path(path).read_bytes(), classes=classes)
    if not isinstance(result, LabelVolume):
        raise NiftiUnsupportedError(f'{path} is not a u8 label map with classes {tuple(classes)}')
    return result


# --------------------------------------------------------------------------
# Манифест датасета
# --------------------------------------------------------------------------

MANIFEST_COLUMNS = ['case_id', 'domain', 'split', 'image', 'label']


@dataclass(frozen=True)
class CaseEntry:
    case_id: str
    domain: str
    split: str
    image: str
    label: Optional[str] = None


@dataclass
class DatasetManifest:
    """Список кейсов; пути хранятся относительно каталога манифеста"""
    root: Path
    entries: List[CaseEntry] = field(default_factory=list)

    def select(self, domain: str, split: Optional[str] = None) -> List[CaseEntry]:
        return [
            e for e in self.entries
            if e.domain == domain and (split is None or e.split == split)
        ]

    def image_path(self, entry: CaseEntry) -> Path:
        return self.root / entry.image

    def label_path(self, entry: CaseEntry) -> Optional[Path]:
        return self.root / entry.label if entry.label else None

    def write(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8', newline='') as fh:
            writer = csv.writer(fh, delimiter='\t', lineterminator='\n')
            writer.writerow(MANIFEST_COLUMNS)
            for e in self.entries:
                writer.writerow([e.case_id, e.domain, e.split, e.image, e.label or ''])
        return path

    @classmethod
    def read(cls, path: Path) -> 'DatasetManifest':
        path = Path(path)
        entries = []
        seen = set()
        with open(path, 'r', encoding='utf-8', newline='') as fh:
            reader = csv.reader(fh, delimiter='\t')
            header = next(reader, None)
            if header != MANIFEST_COLUMNS:
                raise ManifestError(f'{path}: unexpected header {header}')
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != len(MANIFEST_COLUMNS):
                    raise ManifestError(f'{path}:{lineno}: expected {len(MANIFEST_COLUMNS)} columns')
                case_id, domain, split, image, label = row
                if domain not in DOMAINS:
                    raise ManifestError(f'{path}:{lineno}: unknown domain {domain!r}')
                if split not in SPLITS:
                    raise ManifestError(f'{path}:{lineno}: unknown split {split!r}')
                if case_id in seen:
                    raise ManifestError(f'{path}:{lineno}: duplicate case id {case_id!r}')
                seen.add(case_id)
                entries.append(CaseEntry(case_id, domain, split, image, label or None))
        return cls(root=path.parent, entries=entries)
