"""Adam optimiser and global-norm gradient clipping."""
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, ContractError


@dataclass
class AdamState:
    first: list = field(default_factory=list)
    second: list = field(default_factory=list)
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], 0)


def adam_step(params, grads, state, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
    """Bias-corrected Adam update applied in place to ``params`` (a list of Tensors).

    ``grads`` is a list of arrays aligned with ``params``. ``state`` is mutated
    and also returned.
    """
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    if not (len(params) == len(grads) == len(state.first) == len(state.second)):
        raise ContractError(
            f"adam_step: {len(params)} params, {len(grads)} grads, {len(state.first)} state slots"
        )
    for p, g, m in zip(params, grads, state.first):
        if p.data.shape != np.shape(g) or m.shape != p.data.shape:
            raise ContractError(f"adam_step: param {p.data.shape}, grad {np.shape(g)}, state {m.shape}")
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.first, state.second):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


class Adam:
    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.state = AdamState.zeros_like(self.params)

    def step(self, grads):
        adam_step(self.params, grads, self.state, self.lr, self.betas, self.eps)


def clip_grad_norm(grads, max_norm):
    """Scale ``grads`` (list of arrays) in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if max_norm is not None and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for g in grads:
            g *= factor
    return total
