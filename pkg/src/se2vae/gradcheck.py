"""Finite-difference gradient checking.

Runs the graph in a float64 shadow mode: single-precision central
differences are too noisy to tell bugs from roundoff. The builder function
must be deterministic under its frozen noise; this is verified before
differencing.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad, tape


def grad_check(build_loss: Callable[[], Tensor], params: Sequence[Tensor],
               eps_fd: float = 1e-4, floor: float = 1e-8) -> float:
    """Max relative error between analytic and central-difference gradients.

    relative error = |analytic - numeric| / max(|analytic|, |numeric|, floor),
    maximized over every element of every parameter. Raise `floor` when the
    loss is large: central differences of a near-zero gradient bottom out at
    machine-epsilon times the loss over eps_fd, and comparing that noise
    against the default floor reports spurious errors.
    """
    for p in params:
        if p.dtype != np.float64:
            raise ValueError("grad_check requires float64 parameters")
        p.zero_grad()

    with no_grad():
        l0 = build_loss().item()
        l1 = build_loss().item()
    if l0 != l1:
        raise RuntimeError("build_loss is not deterministic under fixed seed")

    with tape():
        loss = build_loss()
        backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]

    worst = 0.0
    with no_grad():
        for p, an in zip(params, analytic):
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps_fd
                lp = build_loss().item()
                flat[i] = orig - eps_fd
                lm = build_loss().item()
                flat[i] = orig
                num = (lp - lm) / (2.0 * eps_fd)
                a = an.reshape(-1)[i]
                err = abs(a - num) / max(abs(a), abs(num), floor)
                worst = max(worst, err)
    return worst
