"""Counterfactual intervention learning.

Factual attention ``A`` and counterfactual attention ``C`` each gate the backbone
feature; the gated features are pooled and passed through one shared linear
classifier. Averaging over the M maps gives the factual and counterfactual
likelihood logits, and their difference is the effect logit trained with
cross-entropy.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dcdc import DcdcKernelSet, dcdc_attention_forward
from .errors import ShapeError
from .tensor_core import as_tensor, check_finite, log_softmax, make_rng, sigmoid, softmax

FACTUAL = "factual"
COUNTERFACTUAL = "counterfactual"


@dataclass(frozen=True)
class AttentionMaps:
    kind: str
    maps: np.ndarray  # [M, H, W]

    def __post_init__(self):
        if self.kind not in (FACTUAL, COUNTERFACTUAL):
            raise ValueError(f"AttentionMaps: unknown kind {self.kind!r}")
        if self.maps.ndim != 3 or self.maps.shape[0] < 1:
            raise ShapeError(f"AttentionMaps: expected [M,H,W] with M >= 1, got {self.maps.shape}")
        check_finite(self.maps, "AttentionMaps")
        # sigmoid saturates to exactly 0.0 / 1.0 in float64, so the closed interval is checked
        if self.maps.min() < 0.0 or self.maps.max() > 1.0:
            raise ValueError("AttentionMaps: values must lie in [0, 1]")

    @property
    def M(self):
        return self.maps.shape[0]


@dataclass(frozen=True)
class EffectLogits:
    y_f: np.ndarray
    y_cf: np.ndarray
    y_e: np.ndarray

    @classmethod
    def from_pair(cls, y_f, y_cf):
        return cls(y_f, y_cf, y_f - y_cf)

    @property
    def K(self):
        return self.y_e.shape[-1]


def generate_attention(gen: DcdcKernelSet, X, kind: str = FACTUAL) -> AttentionMaps:
    X = as_tensor(X, "generate_attention input")
    if X.ndim != 3:
        raise ShapeError(f"generate_attention: expected [C,H,W], got {X.shape}")
    A, _ = dcdc_attention_forward(gen.params(), X[None])
    return AttentionMaps(kind, A[0])


def sample_predefined(shape, dist: str, rng: np.random.Generator) -> np.ndarray:
    if dist == "uniform":
        # open interval: reject exact zeros, which PCG64's [0, 1) can emit
        u = rng.random(shape)
        return np.where(u == 0.0, np.nextafter(0.0, 1.0), u)
    if dist == "normal":
        return sigmoid(rng.standard_normal(shape))
    raise ValueError(f"predefined_counterfactual: unknown distribution {dist!r}")


def predefined_counterfactual(shape, dist: str = "normal", rng=None, seed: int = 0) -> AttentionMaps:
    """Counterfactual maps drawn i.i.d. from uniform(0,1) or sigmoid(normal(0,1))."""
    if rng is None:
        rng = make_rng(seed)
    return AttentionMaps(COUNTERFACTUAL, sample_predefined(tuple(shape), dist, rng))


# ---------------------------------------------------------------- likelihoods


def attended_pool_forward(X, A):
    """Pooled gated features: out[n,m,c] = mean_p X[n,c,p] * A[n,m,p]."""
    N, C, H, W = X.shape
    if A.shape[0] != N or A.shape[2:] != (H, W):
        raise ShapeError(f"attended_pool: maps {A.shape} do not match feature {X.shape}")
    Xf = X.reshape(N, C, -1)
    Af = A.reshape(N, A.shape[1], -1)
    pooled = np.matmul(Af, Xf.transpose(0, 2, 1)) / (H * W)
    return pooled, (Xf, Af, X.shape)


def attended_pool_backward(dpooled, cache):
    Xf, Af, x_shape = cache
    HW = Xf.shape[-1]
    dX = np.matmul(dpooled.transpose(0, 2, 1), Af) / HW
    dA = np.matmul(dpooled, Xf) / HW
    return dX.reshape(x_shape), dA.reshape(Af.shape[0], Af.shape[1], *x_shape[2:])


def likelihood_forward(X, A, Wcls):
    """Mean over maps of the shared linear head on pooled ``X * A_m``; [N,K]."""
    pooled, pcache = attended_pool_forward(X, A)
    mp = pooled.mean(axis=1)
    return mp @ Wcls.T, (pooled, mp, pcache)


def likelihood_backward(dy, cache, Wcls):
    pooled, mp, pcache = cache
    M = pooled.shape[1]
    dW = dy.T @ mp
    dmp = dy @ Wcls
    dpooled = np.broadcast_to(dmp[:, None, :] / M, pooled.shape)
    dX, dA = attended_pool_backward(dpooled, pcache)
    return dX, dA, dW


def intervention_likelihoods(X, A: AttentionMaps, C_att: AttentionMaps, head) -> EffectLogits:
    """Factual, counterfactual, and effect logits for one feature map [C,H,W].

    ``head`` is the [K, C] shared classifier weight matrix.
    """
    X = as_tensor(X, "intervention_likelihoods input")
    head = as_tensor(head, "classifier head")
    if A.maps.shape != C_att.maps.shape:
        raise ShapeError(f"intervention_likelihoods: factual maps {A.maps.shape} != counterfactual {C_att.maps.shape}")
    if X.ndim != 3 or X.shape[1:] != A.maps.shape[1:]:
        raise ShapeError(f"intervention_likelihoods: feature {X.shape} does not match maps {A.maps.shape}")
    if head.shape[1] != X.shape[0]:
        raise ShapeError(f"intervention_likelihoods: head width {head.shape[1]} != feature channels {X.shape[0]}")
    y_f, _ = likelihood_forward(X[None], A.maps[None], head)
    y_cf, _ = likelihood_forward(X[None], C_att.maps[None], head)
    return EffectLogits.from_pair(check_finite(y_f[0], "y_f"), check_finite(y_cf[0], "y_cf"))


# ---------------------------------------------------------------- loss


def cross_entropy(logits, labels):
    """Mean cross-entropy over a batch [N,K]; returns (loss, dlogits)."""
    N, K = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= K:
        raise ValueError(f"cross_entropy: labels must lie in [0, {K}), got range [{labels.min()}, {labels.max()}]")
    lsm = log_softmax(logits, axis=1)
    loss = -lsm[np.arange(N), labels].sum() / N
    d = softmax(logits, axis=1)
    d[np.arange(N), labels] -= 1.0
    return float(loss), d / N


def counterfactual_loss(e: EffectLogits, y: int) -> float:
    """Cross-entropy of softmax(y_e) against the label ``y``."""
    ye = np.asarray(e.y_e, dtype=np.float64)
    if not 0 <= int(y) < ye.shape[-1]:
        raise ValueError(f"counterfactual_loss: label {y} out of range [0, {ye.shape[-1]})")
    loss, _ = cross_entropy(ye.reshape(1, -1), [int(y)])
    return loss
