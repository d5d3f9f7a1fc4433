"""
Переносимый формат чекпоинта.

Каталог чекпоинта:
    manifest.txt  текстовый манифест форм:
                      format adaptation-checkpoint 1
                      arch <тег архитектуры>
                      seed <seed инициализации>
                      hparams <JSON с отсортированными ключами>
                      param <имя> <d0>x<d1>x... <смещение в элементах>
    params.bin    параметры подряд в порядке манифеста, float32 little-endian
    optim.txt     (необязательно) t, betas, eps состояния Adam
    optim.bin     (необязательно) моменты m, затем v каждого параметра, float32 LE
"""

import json
import math
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import torch

from .exceptions import CheckpointError
from .networks import ParamsModule, build_model
from .optim import OptimState

FORMAT_LINE = 'format adaptation-checkpoint 1'


def _pack(tensors) -> bytes:
    return b''.join(
        np.ascontiguousarray(t.detach().cpu().numpy(), dtype='<f4').tobytes() for t in tensors
    )


def _unpack(payload: bytes, offset: int, shape) -> Tuple[torch.Tensor, int]:
    count = math.prod(shape)
    end = offset + count
    if end * 4 > len(payload):
        raise CheckpointError('checkpoint payload is truncated')
    values = np.frombuffer(payload, dtype='<f4', count=count, offset=offset * 4)
    return torch.from_numpy(values.astype(np.float32).reshape(shape)), end


def save_checkpoint(path: Path, model: ParamsModule, optim_state: Optional[OptimState] = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = [
        FORMAT_LINE,
        f'arch {model.arch}',
        f'seed {model.seed}',
        f'hparams {json.dumps(model.hparams, sort_keys=True)}',
    ]
    offset = 0
    params = list(model.named_parameters())
    for name, shape in model.shape_manifest():
        dims = 'x'.join(str(d) for d in shape)
        lines.append(f'param {name} {dims} {offset}')
        offset += math.prod(shape)
    (path / 'manifest.txt').write_text('\n'.join(lines) + '\n', encoding='utf-8')
    (path / 'params.bin').write_bytes(_pack(p for _, p in params))

    if optim_state is not None:
        optim_lines = [
            f't {optim_state.t}',
            f'betas {optim_state.betas[0]!r} {optim_state.betas[1]!r}',
            f'eps {optim_state.eps!r}',
        ]
        (path / 'optim.txt').write_text('\n'.join(optim_lines) + '\n', encoding='utf-8')
        names = [name for name, _ in params]
        payload = _pack(optim_state.m[n] for n in names) + _pack(optim_state.v[n] for n in names)
        (path / 'optim.bin').write_bytes(payload)
    return path


def _parse_manifest(text: str):
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines or lines[0] != FORMAT_LINE:
        raise CheckpointError('not an adaptation checkpoint manifest')
    arch = seed = hparams = None
    entries = []
    for line in lines[1:]:
        key, _, rest = line.partition(' ')
        if key == 'arch':
            arch = rest
        elif key == 'seed':
            seed = int(rest)
        elif key == 'hparams':
            hparams = json.loads(rest)
        elif key == 'param':
            name, dims, offset = rest.split(' ')
            shape = tuple(int(d) for d in dims.split('x'))
            entries.append((name, shape, int(offset)))
        else:
            raise CheckpointError(f'unknown manifest key {key!r}')
    if arch is None or seed is None or hparams is None:
        raise CheckpointError('manifest lacks arch, seed or hparams')
    return arch, seed, hparams, entries


def load_checkpoint(path: Path) -> Tuple[ParamsModule, Optional[OptimState]]:
    """Пересобирает модель по манифесту и загружает параметры (и состояние Adam, если есть)"""
    path = Path(path)
    try:
        arch, seed, hparams, entries = _parse_manifest((path / 'manifest.txt').read_text(encoding='utf-8'))
        payload = (path / 'params.bin').read_bytes()
    except FileNotFoundError as e:
        raise CheckpointError(f'incomplete checkpoint at {path}: {e}') from e
    except ValueError as e:
        raise CheckpointError(f'malformed checkpoint manifest at {path}: {e}') from e

    model = build_model(arch, hparams, seed)
    expected = model.shape_manifest()
    if [(n, s) for n, s, _ in entries] != expected:
        raise CheckpointError(f'checkpoint parameters do not match architecture {arch}')

    state = {}
    for (name, _, offset), (_, shape) in zip(entries, expected):
        tensor, _ = _unpack(payload, offset, shape)
        state[name] = tensor
    model.load_state_dict(state, strict=True)

    optim_state = None
    if (path / 'optim.txt').exists():
        meta = {}
        for line in (path / 'optim.txt').read_text(encoding='utf-8').splitlines():
            key, _, rest = line.partition(' ')
            meta[key] = rest
        moments = (path / 'optim.bin').read_bytes()
        m, v = {}, {}
        offset = 0
        for name, shape in expected:
            m[name], offset = _unpack(moments, offset, shape)
        for name, shape in expected:
            v[name], offset = _unpack(moments, offset, shape)
        beta1, beta2 = (float(b) for b in meta['betas'].split())
        optim_state = OptimState(m, v, int(meta['t']), (beta1, beta2), float(meta['eps']))
    return model, optim_state
