"""Central finite-difference check of reverse-mode gradients."""
from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .tensor import Graph, Tensor, backward


def finite_difference_check(loss_fn: Callable[[], Tensor], leaf: Tensor, epsilon: float = 1e-4,
                            n_coords: Optional[int] = 100, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` rebuilds the scalar loss from the current value of
    ``leaf.data``; it is called once under a :class:`Graph` for the analytic
    gradient and twice per sampled coordinate without one. Coordinates whose
    +/- epsilon probes cross a non-differentiable point (relu, hinge, argmax
    switches) are skipped; a kink shows up as one-sided differences that
    disagree at first order.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    leaf.requires_grad = True
    with Graph() as g:
        loss = loss_fn()
    backward(g, loss)
    analytic = leaf.grad.ravel().copy()

    flat = leaf.data.reshape(-1)
    rng = np.random.default_rng(seed)
    if n_coords is None or n_coords >= flat.size:
        coords = np.arange(flat.size)
    else:
        coords = rng.choice(flat.size, size=n_coords, replace=False)

    base = float(loss_fn().data)
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + epsilon
        up = float(loss_fn().data)
        flat[i] = orig - epsilon
        down = float(loss_fn().data)
        flat[i] = orig
        fwd, bwd = (up - base) / epsilon, (base - down) / epsilon
        numeric = (up - down) / (2 * epsilon)
        # one-sided slopes that disagree at first order mean a kink inside the probe
        if abs(fwd - bwd) > 1e-3 * max(abs(fwd), abs(bwd), 1.0):
            continue
        a = analytic[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
