"""Rank-based diversity constraint on the generator bases.

The nuclear norm (sum of singular values) is the convex surrogate for rank; its
gradient at a matrix with thin SVD ``U diag(S) V^T`` is ``U V^T``. The diversity
loss is the negated sum of nuclear norms over the factual and counterfactual
bases, so descending on it raises their effective rank.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor_core import as_tensor, check_finite, thin_svd


def nuclear_norm(W) -> float:
    W = as_tensor(W, "nuclear_norm input")
    return float(np.sum(thin_svd(W).S))


def nuclear_norm_grad(W) -> np.ndarray:
    """``U V^T`` from the thin SVD of ``W``.

    At rank-deficient ``W`` this is still a valid subgradient; the all-zero matrix
    maps to the zero matrix by convention.
    """
    W = as_tensor(W, "nuclear_norm_grad input")
    if not np.any(W):
        return np.zeros_like(W)
    svd = thin_svd(W)
    return svd.U @ svd.V.T


@dataclass
class DiversityTerm:
    value: float
    norms: dict = field(default_factory=dict)
    grads: dict = field(default_factory=dict)


def diversity_loss(P_A=None, Q_A=None, P_C=None, Q_C=None) -> DiversityTerm:
    """Negated sum of the nuclear norms of the four bases.

    Any basis may be ``None`` (a static or predefined branch has none); it then
    contributes nothing.
    """
    norms, grads = {}, {}
    for name, W in (("P_A", P_A), ("Q_A", Q_A), ("P_C", P_C), ("Q_C", Q_C)):
        if W is None:
            continue
        W = as_tensor(W, name)
        check_finite(W, f"diversity_loss {name}")
        if np.any(W):
            svd = thin_svd(W)
            norms[name] = float(np.sum(svd.S))
            grads[name] = -(svd.U @ svd.V.T)
        else:
            norms[name] = 0.0
            grads[name] = np.zeros_like(W)
    return DiversityTerm(value=-sum(norms.values()), norms=norms, grads=grads)
