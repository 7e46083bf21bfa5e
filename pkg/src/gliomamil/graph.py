"""Label-correlation graph over the three molecular-marker features.

A single graph-convolution layer mixes the marker features through a
co-occurrence matrix estimated from training labels, and a companion loss
pulls their pairwise cosine similarities toward the same matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError, EstimationError

MARKERS = ("idh", "codel_1p19q", "cdkn_homdel")


@dataclass(frozen=True)
class CooccurrenceMatrix:
    A: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.A, dtype=np.float64)
        if a.shape != (3, 3):
            raise DimensionError(f"co-occurrence matrix must be 3x3, got {a.shape}")
        object.__setattr__(self, "A", a)

    def to_manifest(self) -> str:
        return " ".join(f"{v:.17g}" for v in self.A.reshape(-1))

    @classmethod
    def from_manifest(cls, text: str) -> "CooccurrenceMatrix":
        vals = [float(v) for v in text.split()]
        if len(vals) != 9:
            raise ConfigError("co-occurrence manifest entry needs 9 floats")
        return cls(np.array(vals).reshape(3, 3))


def _marker_matrix(labels) -> np.ndarray:
    if isinstance(labels, np.ndarray):
        m = labels
    else:
        m = np.array([[lab.idh, lab.codel_1p19q, lab.cdkn_homdel] for lab in labels])
    if m.ndim != 2 or m.shape[0] == 0:
        raise EstimationError("co-occurrence needs a non-empty label set")
    return m[:, :3].astype(bool)


def conditional(pos: np.ndarray, i: int, j: int, smooth: bool | None = None) -> float:
    """P(marker i altered | marker j altered) from a boolean label matrix.

    ``smooth=None`` applies add-one smoothing only when marker j is never
    altered; ``True``/``False`` force it on or off.
    """
    both = int(np.sum(pos[:, i] & pos[:, j]))
    given = int(np.sum(pos[:, j]))
    if smooth is None:
        smooth = given == 0
    if smooth:
        return (both + 1) / (given + 2)
    if given == 0:
        raise EstimationError(f"marker {MARKERS[j]} never altered; conditional undefined without smoothing")
    return both / given


def estimate_cooccurrence(labels, smooth: bool | None = None) -> CooccurrenceMatrix:
    """Symmetrized conditional co-occurrence of the three altered marker states."""
    pos = _marker_matrix(labels)
    a = np.eye(3)
    for i in range(3):
        for j in range(i + 1, 3):
            a[i, j] = a[j, i] = 0.5 * (conditional(pos, i, j, smooth) + conditional(pos, j, i, smooth))
    return CooccurrenceMatrix(a)


@dataclass
class GraphParams:
    W_g: Tensor
    alpha: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("graph balancing weight must lie in [0, 1]")


def _matrix(A) -> np.ndarray:
    return A.A if isinstance(A, CooccurrenceMatrix) else np.asarray(getattr(A, "data", A), dtype=np.float64)


def gcn_forward(f_in: Tensor, A, params: GraphParams, slope: float = 0.01) -> Tensor:
    """``F_out = alpha * leaky(A F_in W_g) + (1 - alpha) * F_in``.

    ``f_in`` is ``(3, C)`` or a batch ``(B, 3, C)``. Evaluated as
    ``F_in + alpha * (F_mid - F_in)`` so that F_mid == F_in or alpha == 0
    reproduce F_in bit for bit.
    """
    a = _matrix(A)
    c = f_in.shape[-1]
    batched = f_in.data.ndim == 3
    if f_in.shape[-2:] != (3, c) or f_in.data.ndim not in (2, 3) or a.shape != (3, 3) or params.W_g.shape != (c, c):
        raise DimensionError(
            f"gcn_forward: got F_in {f_in.shape}, A {a.shape}, W_g {params.W_g.shape}"
        )
    if batched:
        b = f_in.shape[0]
        mixed = ad.matmul(Tensor(np.broadcast_to(a, (b, 3, 3))), f_in)
        f_mid = ad.reshape(ad.matmul(ad.reshape(mixed, (b * 3, c)), params.W_g), (b, 3, c))
    else:
        f_mid = ad.matmul(ad.matmul(Tensor(a), f_in), params.W_g)
    f_mid = ad.leaky_relu(f_mid, slope)
    return f_in + (f_mid - f_in) * params.alpha


def cosine_matrix(f: Tensor) -> Tensor:
    """Pairwise cosine similarities of the rows of a 2-D tensor, one op per pair."""
    rows = [f[i] for i in range(f.shape[0])]
    entries = [ad.cosine_similarity(u, v) for u in rows for v in rows]
    return ad.reshape(ad.stack(entries), (len(rows), len(rows)))


def lc_loss(f_out: Tensor, A) -> Tensor:
    """Mean squared error over all nine entries of ``A - D_cos(F_out)``.

    A ``(B, 3, C)`` batch returns the mean of the per-bag losses.
    """
    a = _matrix(A)
    if f_out.data.ndim not in (2, 3) or f_out.shape[-2] != 3:
        raise DimensionError(f"lc_loss expects 3xC feature rows, got {f_out.shape}")
    unit = ad.normalize_rows(f_out)
    if f_out.data.ndim == 2:
        return ad.mse(ad.matmul(unit, ad.transpose(unit)), Tensor(a))
    d_cos = ad.matmul(unit, ad.transpose(unit, (0, 2, 1)))
    return ad.mse(d_cos, Tensor(np.broadcast_to(a, d_cos.shape)))
