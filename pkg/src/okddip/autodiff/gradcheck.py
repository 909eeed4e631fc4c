from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def finite_difference_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    eps: float = 1e-5,
    numeric_f: Callable[..., Tensor] | None = None,
) -> float:
    """Largest relative gap between taped gradients and central differences.

    ``f`` is called with ``x`` exactly as given (a tensor or a list of
    tensors) and must return a scalar tensor. Per coordinate the gap is
    ``|analytic - numeric| / (|analytic| + |numeric| + 1e-8)``.

    ``numeric_f``, when given, is differenced instead of ``f``. This checks
    stop-gradient paths: pass a variant of ``f`` whose detached quantities
    are frozen at the unperturbed point.
    """
    g = f if numeric_f is None else numeric_f
    params = [x] if isinstance(x, Tensor) else list(x)
    saved_flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = True
        p.grad = None
    backward(f(x))
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            a_flat = a.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = g(x).item()
                flat[i] = orig - eps
                down = g(x).item()
                flat[i] = orig
                num = (up - down) / (2 * eps)
                gap = abs(a_flat[i] - num) / (abs(a_flat[i]) + abs(num) + 1e-8)
                worst = max(worst, gap)
    for p, flag in zip(params, saved_flags):
        p.requires_grad = flag
        p.grad = None
    return worst
