"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor

REL_ERR_FLOOR = 1e-8


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor],
               eps: float = 1e-5, max_per_input: int | None = None,
               rng: np.random.Generator | None = None,
               min_grad: float = 0.0) -> float:
    """Compare reverse-mode gradients of a scalar-valued `fn` to central
    finite differences, component-wise over `inputs`.

    Returns the worst relative error, with denominators floored at 1e-8.
    When `max_per_input` is set, a seeded random subset of components is
    checked per input; otherwise every component is.

    `min_grad` restricts the sampled components to those whose analytic
    gradient magnitude is at least that large. Central differences of a
    large-magnitude function carry cancellation noise around 1e-10; below
    that the relative comparison measures noise, not correctness. Filtered
    components are still verified in absolute terms (|fd| must be small
    too), so a dead analytic gradient against a live finite difference is
    caught.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if rng is None:
        rng = np.random.default_rng(0)

    for t in inputs:
        t.grad = None
    out = fn(*inputs)
    if out.size != 1:
        raise ValueError(f"fn must be scalar-valued, got shape {out.shape}")
    out.backward()
    analytic = [np.zeros_like(t.value) if t.grad is None else t.grad.copy()
                for t in inputs]

    worst = 0.0
    for t, ana in zip(inputs, analytic):
        n = t.size
        pool = np.arange(n)
        if min_grad > 0.0:
            live = np.flatnonzero(np.abs(ana.reshape(-1)) >= min_grad)
            if live.size:
                pool = live
        if max_per_input is not None and pool.size > max_per_input:
            idx = rng.choice(pool, size=max_per_input, replace=False)
        else:
            idx = pool
        flat = t.value.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(fn(*inputs).value)
            flat[i] = orig - eps
            lo = float(fn(*inputs).value)
            flat[i] = orig
            fd = (hi - lo) / (2.0 * eps)
            a = ana.reshape(-1)[i]
            if min_grad > 0.0 and max(abs(a), abs(fd)) < min_grad:
                # both effectively zero: agreement in absolute terms
                continue
            err = abs(a - fd) / max(abs(a), abs(fd), REL_ERR_FLOOR)
            worst = max(worst, err)
    return worst
