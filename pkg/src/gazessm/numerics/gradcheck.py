"""Central finite-difference gradient checker.

The checker is the one oracle every differentiable op is validated
against; it never calls an op's analytic backward for the reference side.
Run it in float64 (h around 1e-5), never float32.
"""
from __future__ import annotations

import numpy as np

from ..errors import ContractError
from .tensor import Tensor, backward


def grad_check(f, params, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` is a zero-argument callable returning a scalar Tensor that
    depends on ``params``.  Error per coordinate is
    |analytic - numeric| / max(1, |analytic|); the max over all
    coordinates of all params is returned.
    """
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise ContractError("grad_check requires float64 parameters")
        p.grad = None

    loss = f()
    backward(loss)
    analytic = []
    for p in params:
        if p.grad is None:
            analytic.append(np.zeros_like(p.data))
        else:
            analytic.append(p.grad.copy())

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f().item()
            flat[i] = orig - h
            f_minus = f().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = abs(gflat[i] - numeric) / max(1.0, abs(gflat[i]))
            if err > worst:
                worst = err
    return worst
