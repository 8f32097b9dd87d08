"""Finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import NumericalError
from .tensor import Tensor

# absolute floor on the relative-error denominator, so entries whose true
# gradient is ~0 are judged on absolute error
DENOM_FLOOR = 1e-6


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between autodiff and central-difference gradients.

    ``f`` must rebuild the computation from ``params`` on every call. With
    ``max_entries`` only that many randomly chosen entries per parameter are
    probed.
    """
    for p in params:
        p.grad = None
    out = f()
    if not np.all(np.isfinite(out.data)):
        raise NumericalError(f"non-finite objective value {out.data}")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f().data)
            flat[i] = orig - eps
            lo = float(f().data)
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericalError(f"non-finite objective while probing {p.name or 'parameter'}[{i}]")
            numeric = (hi - lo) / (2 * eps)
            a = float(ga.reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), DENOM_FLOOR)
            worst = max(worst, err)
    return worst
