"""Top-K decision-weight agreement between two tasks and its curriculum schedule."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError


@dataclass(frozen=True)
class CurriculumSchedule:
    K0: int = 1250
    m0: int = 10
    beta: float = 0.85

    def __post_init__(self):
        if self.K0 < 1 or self.m0 < 1:
            raise ConfigError("K0 and m0 must be positive integers")
        if not 0.0 < self.beta <= 1.0:
            raise ConfigError("beta must lie in (0, 1]")

    def scaled_to(self, n_patches: int, reference_n: int = 2500) -> "CurriculumSchedule":
        """Rescale K0 so K0/N keeps the ratio it has at ``reference_n`` patches."""
        k0 = max(1, round(self.K0 * n_patches / reference_n))
        return CurriculumSchedule(k0, self.m0, self.beta)


def schedule_k(m: int, sched: CurriculumSchedule, n_patches: int | None = None) -> int:
    """K_m = K0 * beta**floor(m / m0), rounded to an integer and clamped to [1, N].

    Rounding uses Python's ``round`` (ties to even), so 1062.5 -> 1062.
    """
    if m < 0:
        raise ContractError("epoch index must be non-negative")
    k = max(1, round(sched.K0 * sched.beta ** (m // sched.m0)))
    if n_patches is not None:
        k = min(k, n_patches)
    return k


@dataclass(frozen=True)
class RankedWeights:
    order: np.ndarray
    weights: np.ndarray

    def top(self, k: int) -> np.ndarray:
        return self.order[:k]


def rank_weights(weights) -> RankedWeights:
    """Sort patch indices by weight, descending; ties keep ascending index."""
    w = np.asarray(getattr(weights, "data", weights), dtype=np.float64).reshape(-1)
    if w.size < 1:
        raise ContractError("cannot rank an empty weight vector")
    order = np.argsort(-w, kind="stable")
    return RankedWeights(order, w)


def _check_k(k: int, n: int) -> None:
    if not 1 <= k <= n:
        raise ContractError(f"K={k} outside [1, {n}]")


def dcc_overlap(ranked_a: RankedWeights, ranked_b: RankedWeights, k: int) -> float:
    n = ranked_a.order.size
    if ranked_b.order.size != n:
        raise ContractError("rankings cover different patch counts")
    _check_k(k, n)
    top_a = np.zeros(n, dtype=bool)
    top_b = np.zeros(n, dtype=bool)
    top_a[ranked_a.top(k)] = True
    top_b[ranked_b.top(k)] = True
    hits = int(top_b[ranked_a.top(k)].sum()) + int(top_a[ranked_b.top(k)].sum())
    return hits / (2 * k)


def soft_threshold(ranked: RankedWeights, k: int) -> float:
    """Membership cut between the K-th and (K+1)-th largest weights.

    The midpoint (rather than the K-th weight itself) puts every top-K
    patch strictly above the cut, so the relaxation tends to the hard
    indicator as the temperature goes to zero.
    """
    sorted_w = ranked.weights[ranked.order]
    if k == sorted_w.size:
        return float(sorted_w[-1]) - 1.0
    return 0.5 * float(sorted_w[k - 1] + sorted_w[k])


class DCCLoss(NamedTuple):
    hard: float
    surrogate: Tensor
    overlap: float


def dcc_loss(w_a: Tensor, w_b: Tensor, k: int, tau: float = 0.05) -> DCCLoss:
    """Disagreement between the top-K patch sets of two tasks.

    ``hard`` is ``1 - dcc_overlap`` and carries no gradient. ``surrogate``
    relaxes top-K membership to ``sigmoid((w - theta) / tau)`` with the cut
    ``theta`` held constant, and equals ``1 - sum(soft_a * soft_b) / K``.
    """
    if w_a.shape != w_b.shape or w_a.data.ndim != 1:
        raise ContractError("decision weights must be equal-length vectors")
    if tau <= 0:
        raise ConfigError("temperature must be positive")
    ra, rb = rank_weights(w_a), rank_weights(w_b)
    overlap = dcc_overlap(ra, rb, k)
    soft_a = ad.sigmoid(ad.add(w_a, -soft_threshold(ra, k)) * (1.0 / tau))
    soft_b = ad.sigmoid(ad.add(w_b, -soft_threshold(rb, k)) * (1.0 / tau))
    surrogate = 1.0 - ad.sum(soft_a * soft_b) * (1.0 / k)
    return DCCLoss(1.0 - overlap, surrogate, overlap)


def batch_thresholds(w_a, w_b, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-row membership cuts for two ``(B, N)`` weight arrays."""
    a = np.asarray(getattr(w_a, "data", w_a))
    b = np.asarray(getattr(w_b, "data", w_b))
    return (np.array([soft_threshold(rank_weights(r), k) for r in a]),
            np.array([soft_threshold(rank_weights(r), k) for r in b]))


def dcc_loss_batch(w_a: Tensor, w_b: Tensor, k: int, tau: float = 0.05, thresholds=None) -> DCCLoss:
    """Batch mean of :func:`dcc_loss` over the rows of two ``(B, N)`` weight tensors.

    ``thresholds`` pins the per-row cuts (as returned by
    :func:`batch_thresholds`) instead of recomputing them from the weights.
    """
    if w_a.shape != w_b.shape or w_a.data.ndim != 2:
        raise ContractError("batched decision weights must be equal (B, N) tensors")
    if tau <= 0:
        raise ConfigError("temperature must be positive")
    b, n = w_a.shape
    _check_k(k, n)
    overlaps = [dcc_overlap(rank_weights(w_a.data[i]), rank_weights(w_b.data[i]), k) for i in range(b)]
    ta, tb = batch_thresholds(w_a, w_b, k) if thresholds is None else thresholds
    theta_a = np.repeat(np.asarray(ta, dtype=np.float64).reshape(b, 1), n, axis=1)
    theta_b = np.repeat(np.asarray(tb, dtype=np.float64).reshape(b, 1), n, axis=1)
    soft_a = ad.sigmoid((w_a - Tensor(theta_a)) * (1.0 / tau))
    soft_b = ad.sigmoid((w_b - Tensor(theta_b)) * (1.0 / tau))
    surrogate = 1.0 - ad.sum(soft_a * soft_b) * (1.0 / (k * b))
    overlap = float(np.mean(overlaps))
    return DCCLoss(1.0 - overlap, surrogate, overlap)


def format_epoch_line(epoch: int, k: int, hard_overlap: float, surrogate: float) -> str:
    return f"{epoch:>5d} {k:>6d} {hard_overlap:>12.6f} {surrogate:>14.6f}"
