"""AdamW with decoupled weight decay, plus global gradient-norm clipping."""
from __future__ import annotations

import numpy as np

from ..errors import ContractError


class AdamW:
    """Bias-corrected Adam moments with decay applied directly to weights.

    Moment buffers mirror each parameter's shape; the step counter advances
    by one per ``step()`` call.
    """

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        if not self.params:
            raise ContractError("AdamW: empty parameter list")
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ContractError(
                    f"AdamW: grad shape {g.shape} != param shape {p.data.shape}"
                )
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            mhat = self.m[i] / bc1
            vhat = self.v[i] / bc2
            update = mhat / (np.sqrt(vhat) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - self.lr * update.astype(p.data.dtype, copy=False)


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale all grads so their global L2 norm is at most ``max_norm``.

    Returns the scale that was applied (1.0 when no clipping happened).
    """
    params = list(params)
    sq = 0.0
    for p in params:
        if p.grad is None:
            raise ContractError("clip_grad_norm: parameter has no gradient")
        sq += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = float(np.sqrt(sq))
    if norm <= max_norm or norm == 0.0:
        return 1.0
    scale = max_norm / norm
    for p in params:
        p.grad = (p.grad * scale).astype(p.grad.dtype, copy=False)
    return scale
