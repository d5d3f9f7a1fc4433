"""Функции потерь: LSGAN, L1 и Dice + cross-entropy для сегментатора."""

import torch
import torch.nn.functional as F

from .exceptions import ShapeMismatchError

DICE_SMOOTH = 1e-5


def _check_same_shape(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ShapeMismatchError(f'shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}')


def lsgan_loss(scores: torch.Tensor, target: float) -> torch.Tensor:
    """Среднеквадратичное отклонение карты оценок от цели 0 или 1"""
    if target not in (0, 1):
        raise ValueError(f'lsgan target must be 0 or 1, got {target}')
    return torch.mean((scores - float(target)) ** 2)


def l1_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_same_shape(a, b)
    return torch.mean(torch.abs(a - b))


def soft_dice(probs: torch.Tensor, one_hot: torch.Tensor, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """Dice по классам, суммирование по батчу и пространству (batch dice)"""
    axes = [0] + list(range(2, probs.ndim))
    intersection = torch.sum(probs * one_hot, dim=axes)
    total = torch.sum(probs, dim=axes) + torch.sum(one_hot, dim=axes)
    return (2.0 * intersection + smooth) / (total + smooth)


def dice_ce(logits: torch.Tensor, labels: torch.Tensor, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """
    (1 − средний soft Dice по классам переднего плана) + cross-entropy.

    logits: (N, C, *spatial), labels: (N, *spatial) с индексами классов.
    """
    if logits.ndim < 3 or labels.shape[0] != logits.shape[0] or labels.shape[1:] != logits.shape[2:]:
        raise ShapeMismatchError(
            f'logits {tuple(logits.shape)} do not match labels {tuple(labels.shape)}'
        )
    labels = labels.long()
    n_classes = logits.shape[1]
    ce = F.cross_entropy(logits, labels)
    probs = torch.softmax(logits, dim=1)
    one_hot = F.one_hot(labels, n_classes).movedim(-1, 1).to(probs.dtype)
    dice = soft_dice(probs, one_hot, smooth)[1:]
    return (1.0 - dice.mean()) + ce
