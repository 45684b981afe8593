from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import DiffTensor, backward, no_grad, zero_grad


def finite_difference_check(
    f: Callable[[], DiffTensor], params: Sequence[DiffTensor], h: float = 1e-5
) -> float:
    """Max over all parameter entries of |analytic - central| / max(1, |central|).

    ``f`` is re-evaluated with each entry nudged by +/- h; it must be scalar valued.
    Entries frozen by a parameter's ``trainable_mask`` are constants and skipped.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    zero_grad(params)
    backward(f())
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            if not np.shares_memory(flat, p.data):
                raise ValueError(f"parameter {p.name} is not contiguous")
            frozen = None if p.trainable_mask is None else ~p.trainable_mask.reshape(-1)
            for i in range(flat.size):
                if frozen is not None and frozen[i]:
                    continue
                orig = flat[i]
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
                flat[i] = orig
                num = (fp - fm) / (2.0 * h)
                worst = max(worst, abs(a.flat[i] - num) / max(1.0, abs(num)))
    return worst
