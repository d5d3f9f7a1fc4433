"""
Сиды и детерминизм.

Все сиды стадий выводятся из мастер-сида счётчиковой схемой:
    seed = SeedSequence([master, STREAMS[stream], *counters]).generate_state(1)[0]
поэтому итерацию k самообучения можно воспроизвести отдельно от остальных.
"""

import logging

import numpy as np
import torch

logger = logging.getLogger(__name__)

STREAMS = {
    'phantoms': 1,
    'translation': 2,
    'segmentation': 3,
    'self_training': 4,
    'batches': 5,
    'pool_a': 6,
    'pool_b': 7,
    'g_ab': 8,
    'g_ba': 9,
    'd_a': 10,
    'd_b': 11,
    'segmenter_init': 12,
    'augment': 13,
}


def derive_seed(master: int, stream: str, *counters: int) -> int:
    if master < 0 or any(c < 0 for c in counters):
        raise ValueError('seeds and counters must be non-negative')
    sequence = np.random.SeedSequence([int(master), STREAMS[stream], *[int(c) for c in counters]])
    return int(sequence.generate_state(1)[0])


def configure_torch(threads: int = 1):
    """Детерминированное выполнение на CPU с фиксированным числом потоков"""
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(max(1, int(threads)))
    logger.debug('torch configured: %d intra-op threads, deterministic algorithms', threads)
