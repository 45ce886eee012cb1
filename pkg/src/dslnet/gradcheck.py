"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, precision


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Infinity-norm error relative to the larger of the two gradients."""
    denom = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / denom)


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], *, step: float = 1e-3,
              seed: int = 0, wrt: Sequence[int] | None = None, max_coords: int | None = 200,
              dtype=np.float64) -> float:
    """Compare analytic and finite-difference gradients of ``fn``.

    The scalar checked is ``sum(fn(*inputs) * R)`` for a fixed random ``R``.
    Returns the worst relative error over the inputs listed in ``wrt``
    (all of them by default). At most ``max_coords`` coordinates per input
    are probed, chosen at random.
    """
    rng = np.random.default_rng(seed)
    wrt = list(range(len(inputs))) if wrt is None else list(wrt)
    with precision(dtype):
        arrays = [np.asarray(a, dtype=dtype).copy() for a in inputs]
        tensors = [Tensor(a, requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
        out = fn(*tensors)
        weights = rng.standard_normal(out.shape).astype(dtype)
        (out * Tensor(weights)).sum().backward()

        def value() -> float:
            res = fn(*[Tensor(a) for a in arrays])
            return float(np.sum(res.data.astype(np.float64) * weights))

        worst = 0.0
        for i in wrt:
            a = arrays[i]
            analytic = tensors[i].grad
            if analytic is None:
                analytic = np.zeros_like(a)
            flat = a.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            numeric = np.empty(coords.size)
            for j, c in enumerate(coords):
                orig = flat[c]
                flat[c] = orig + step
                up = value()
                flat[c] = orig - step
                down = value()
                flat[c] = orig
                numeric[j] = (up - down) / (2 * step)
            worst = max(worst, relative_error(analytic.reshape(-1)[coords].astype(np.float64), numeric))
    return worst
