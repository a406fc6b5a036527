"""AdamW with decoupled decay, plus the warm-up/cosine/layer-decay schedule.

The optimizer only ever touches parameters whose ``trainable`` flag is set;
frozen parameters stay bit-identical no matter how many steps run. Learning
rates combine three factors: the base rate, a warm-up-then-cosine schedule
over the run, and a per-parameter depth multiplier ``decay^(L - index)``
where the head sits at index L (multiplier 1) and the embedding shares
index 0 with the deepest encoder layer.
"""

from __future__ import annotations

import math

import numpy as np

from .numerics import Parameter

__all__ = ["AdamW", "lr_at_step", "layer_multiplier"]


def layer_multiplier(layer_index: int, num_layers: int, layer_decay: float = 0.65) -> float:
    return layer_decay ** (num_layers - layer_index)


def lr_at_step(step: int, total_steps: int, base_lr: float,
               warmup_frac: float = 0.1, layer_index: int = 0,
               layer_decay: float = 0.65, num_layers: int = 0) -> float:
    """Linear warm-up to base over the first fraction, cosine to 0 after."""
    if not 0 <= step <= total_steps:
        raise ValueError("step %d outside [0, %d]" % (step, total_steps))
    warmup = int(round(warmup_frac * total_steps))
    if step < warmup:
        sched = base_lr * step / warmup
    elif total_steps == warmup:
        sched = base_lr
    else:
        progress = (step - warmup) / (total_steps - warmup)
        sched = base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
    return sched * layer_multiplier(layer_index, num_layers, layer_decay)


class AdamW:
    """Decoupled-weight-decay Adam over a name -> Parameter mapping."""

    def __init__(self, params: dict[str, Parameter],
                 lr_multipliers: dict[str, float] | None = None,
                 betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = dict(params)
        self.multipliers = dict(lr_multipliers or {})
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self._v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        """One update at the given scheduled rate (already warm-up/cosine scaled)."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if not p.trainable:
                continue
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            lr_p = lr * self.multipliers.get(name, 1.0)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - lr_p * (update + self.weight_decay * p.data)
