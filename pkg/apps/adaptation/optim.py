"""Adam с явным состоянием: функциональный шаг и обёртка над моделью."""

from dataclasses import dataclass, field
from typing import Dict, Tuple

import torch

from .exceptions import ShapeMismatchError

GAN_BETAS = (0.5, 0.999)
SEGMENTER_BETAS = (0.9, 0.999)


@dataclass
class OptimState:
    m: Dict[str, torch.Tensor] = field(default_factory=dict)
    v: Dict[str, torch.Tensor] = field(default_factory=dict)
    t: int = 0
    betas: Tuple[float, float] = SEGMENTER_BETAS
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Dict[str, torch.Tensor], betas=SEGMENTER_BETAS, eps=1e-8) -> 'OptimState':
        return cls(
            m={name: torch.zeros_like(p, memory_format=torch.contiguous_format).detach() for name, p in params.items()},
            v={name: torch.zeros_like(p, memory_format=torch.contiguous_format).detach() for name, p in params.items()},
            t=0, betas=tuple(betas), eps=eps,
        )


def adam_step(params: Dict[str, torch.Tensor], grads: Dict[str, torch.Tensor],
              state: OptimState, lr: float) -> Tuple[Dict[str, torch.Tensor], OptimState]:
    """Один шаг Adam с коррекцией смещения; входы не меняются"""
    if set(params) != set(grads) or set(params) != set(state.m) or set(params) != set(state.v):
        raise ShapeMismatchError('params, grads and optimizer state must share parameter names')
    beta1, beta2 = state.betas
    t = state.t + 1
    bias1 = 1.0 - beta1 ** t
    bias2 = 1.0 - beta2 ** t
    new_params, new_m, new_v = {}, {}, {}
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape or state.m[name].shape != p.shape or state.v[name].shape != p.shape:
                raise ShapeMismatchError(f'shape mismatch for parameter {name!r}')
            m = beta1 * state.m[name] + (1.0 - beta1) * g
            v = beta2 * state.v[name] + (1.0 - beta2) * g * g
            m_hat = m / bias1
            v_hat = v / bias2
            new_params[name] = p.detach() - lr * m_hat / (torch.sqrt(v_hat) + state.eps)
            new_m[name] = m
            new_v[name] = v
    return new_params, OptimState(new_m, new_v, t, state.betas, state.eps)


class Adam:
    """Оптимизатор одной модели; владеет состоянием эксклюзивно"""

    def __init__(self, model: torch.nn.Module, betas=SEGMENTER_BETAS, eps=1e-8, state: OptimState = None):
        self.model = model
        self.state = state or OptimState.zeros_like(dict(model.named_parameters()), betas, eps)

    def zero_grad(self):
        self.model.zero_grad(set_to_none=True)

    def step(self, lr: float):
        params = dict(self.model.named_parameters())
        grads = {
            name: p.grad if p.grad is not None else torch.zeros_like(p)
            for name, p in params.items()
        }
        updated, self.state = adam_step(params, grads, self.state, lr)
        with torch.no_grad():
            for name, p in params.items():
                p.copy_(updated[name])
