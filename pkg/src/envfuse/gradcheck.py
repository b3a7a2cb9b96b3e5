"""Finite-difference verification of the analytic backward passes.

Central differences are the independent oracle here: the loss is re-evaluated
with each parameter entry nudged +/- epsilon and compared entry-wise against
the gradient produced by `Tensor.backward()`.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor

# Floor for the relative-error denominator. Some gradients are structurally
# exact zeros (a bias added to every key shifts each query row's scores by a
# constant, and softmax is shift-invariant), where central differences leave
# only cancellation noise; the floor must sit above that noise, not at it.
REL_FLOOR = 1e-6


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[tuple[str, Tensor]],
    epsilon: float = 1e-5,
) -> float:
    """Max relative error |analytic - numeric| / max(|a|, |n|, REL_FLOOR).

    `loss_fn` must rebuild its graph on every call and return a scalar Tensor
    that depends on `params` through their `.data` (mutated in place while
    probing). Raises on a non-finite loss.
    """
    if not (1e-5 <= epsilon <= 1e-2):
        raise ValueError("epsilon must lie in [1e-5, 1e-2]")

    for _, p in params:
        p.zero_grad()
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("loss is not finite")
    loss.backward()

    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params
    }

    worst = 0.0
    for name, p in params:
        flat = p.data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + epsilon
            f_plus = float(loss_fn().data)
            flat[i] = saved - epsilon
            f_minus = float(loss_fn().data)
            flat[i] = saved
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            err = abs(a_flat[i] - numeric) / max(abs(a_flat[i]), abs(numeric), REL_FLOOR)
            if err > worst:
                worst = err
    return worst
