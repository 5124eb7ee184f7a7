"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``.

    ``floor`` keeps entries whose true gradient is zero from dividing noise by noise.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def check_gradients(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    h: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Return the max relative error between analytic and central-difference gradients.

    ``loss_fn`` must rebuild the graph from the current ``.data`` of ``tensors``
    on each call. With ``max_entries`` only a random subset of coordinates per
    tensor is probed, which keeps big layers affordable.
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        t.grad = None
    backward(loss_fn())
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    worst = 0.0
    for t, a in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        num = np.empty(idx.size)
        for j, k in enumerate(idx):
            orig = flat[k]
            flat[k] = orig + h
            fp = float(loss_fn().data)
            flat[k] = orig - h
            fm = float(loss_fn().data)
            flat[k] = orig
            num[j] = (fp - fm) / (2 * h)
        err = relative_error(a.reshape(-1)[idx], num)
        worst = max(worst, float(err.max(initial=0.0)))
    for t in tensors:
        t.grad = None
    return worst


def projected_loss(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(out * weights)``; a random projection makes every output count."""
    return (out * Tensor(weights)).sum()
