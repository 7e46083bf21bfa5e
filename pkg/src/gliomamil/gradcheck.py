"""Central finite-difference gradient checking against the autodiff engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps round-off in near-zero gradients (about 1e-10 at step
    1e-6) from registering as large relative errors.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_grad(fn: Callable[[], Tensor], x: Tensor, step: float = 1e-6, coords=None) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. ``x`` (perturbed in place).

    ``coords`` restricts evaluation to a subset of flat indices; other
    entries of the result are left at zero.
    """
    flat = x.data.reshape(-1)
    out = np.zeros(flat.size)
    idx = range(flat.size) if coords is None else coords
    with ad.no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = fn().item()
            flat[i] = orig - step
            fm = fn().item()
            flat[i] = orig
            out[i] = (fp - fm) / (2.0 * step)
    return out.reshape(x.shape)


def check_gradients(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-6,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between autodiff and central differences over ``inputs``.

    With ``max_coords`` set, at most that many randomly chosen entries per
    input are compared.
    """
    for x in inputs:
        x.grad = None
    loss = fn()
    grads = ad.backward(loss)
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for x in inputs:
        analytic = grads.get(x, np.zeros(x.shape))
        coords = None
        if max_coords is not None and x.size > max_coords:
            coords = np.sort(rng.choice(x.size, size=max_coords, replace=False))
        numeric = numeric_grad(fn, x, step, coords)
        if coords is None:
            err = relative_error(analytic, numeric)
        else:
            err = relative_error(analytic.reshape(-1)[coords], numeric.reshape(-1)[coords])
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
