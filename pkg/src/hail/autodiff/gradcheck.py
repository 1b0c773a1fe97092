"""Central finite-difference check of analytic gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import DTYPE, Tensor, backward, no_grad, precision


def _evaluate(f: Callable[[Tensor], Tensor], data: np.ndarray) -> float:
    with no_grad(), precision(np.float64):
        return float(f(Tensor(data)).item())


def check_gradients(
    f: Callable[[Tensor], Tensor],
    x: Tensor | np.ndarray,
    h: float = 1e-3,
    *,
    floor: float = 1e-2,
    max_probes: int | None = None,
    exclude_kinks: bool = True,
    kink_tol: float = 0.1,
    seed: int = 0,
) -> float:
    """Largest relative error between the analytic and numerical gradient.

    The analytic gradient is computed in float32 at ``x``. The numerical one,
    (f(x + h e_i) - f(x - h e_i)) / 2h, is evaluated in float64 so that the
    oracle's roundoff stays far below the tolerance being checked. The
    relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.

    With ``exclude_kinks`` a coordinate is skipped when its forward and
    backward one-sided slopes disagree by more than ``kink_tol`` (relative),
    which only happens when the step crosses a ReLU/max/abs kink. The test
    looks at ``f`` alone, so it cannot hide a wrong analytic gradient.
    ``max_probes`` limits the check to a random subset of coordinates.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    leaf = Tensor(base.copy(), requires_grad=True)
    out = f(leaf)
    backward(out)
    analytic = leaf.grad.reshape(-1).astype(np.float64)

    flat = base.reshape(-1).astype(np.float64)
    f0 = _evaluate(f, flat.reshape(base.shape)) if exclude_kinks else 0.0
    coords = np.arange(flat.size)
    if max_probes is not None and max_probes < flat.size:
        coords = np.sort(np.random.default_rng(seed).choice(flat.size, max_probes, replace=False))

    worst = 0.0
    checked = 0
    for i in coords:
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        fp = _evaluate(f, xp.reshape(base.shape))
        fm = _evaluate(f, xm.reshape(base.shape))
        if exclude_kinks:
            dp = (fp - f0) / h
            dm = (f0 - fm) / h
            if abs(dp - dm) > kink_tol * max(abs(dp), abs(dm), floor):
                continue
        numeric = (fp - fm) / (2 * h)
        a = float(analytic[i])
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        worst = max(worst, err)
        checked += 1
    if checked == 0:
        raise ValueError("every probed coordinate sits on a kink; pick another input")
    return worst
