"""Dynamic convolution for attention generation.

Three generator families share one calling convention (``*_attention_forward``
returns ``(maps, cache)``; ``*_attention_backward`` returns ``(param_grads, dX)``):

* static   -- one sample-agnostic kernel ``W0``.
* vanilla  -- softmax-weighted sum of ``S`` candidate kernels.
* dcdc     -- ``W0 + unflatten(P @ Phi(X) @ Q^T)`` with ``Phi`` produced by a
  bias-free two-layer MLP on the globally pooled feature.

All generators convolve the backbone feature with stride 1 and "same" padding,
then squash with a sigmoid to give M attention maps in (0, 1).

Kernels are flattened row-major over ``(Cin, k, k)``; ``Q`` row index is
``cin*k*k + i*k + j``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor_core import (
    as_tensor,
    check_finite,
    conv2d_backward,
    conv2d_forward,
    global_avg_pool,
    global_avg_pool_backward,
    make_rng,
    per_sample_conv_backward,
    per_sample_conv_forward,
    sigmoid,
    softmax,
)


def _uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------- vanilla


@dataclass(frozen=True)
class VanillaDynConv:
    candidates: np.ndarray  # [S, Cout, Cin, k, k]
    att: np.ndarray  # [S, C] attention head on GAP(X)

    def __post_init__(self):
        if self.candidates.ndim != 5:
            raise ShapeError(f"VanillaDynConv: candidates must be [S,Cout,Cin,k,k], got {self.candidates.shape}")
        if self.candidates.shape[0] < 1:
            raise ShapeError("VanillaDynConv: need S >= 1 candidates")
        if self.att.shape[0] != self.candidates.shape[0]:
            raise ShapeError(
                f"VanillaDynConv: attention head rows {self.att.shape[0]} != S={self.candidates.shape[0]}"
            )

    @property
    def S(self):
        return self.candidates.shape[0]

    def params(self):
        return {"candidates": self.candidates, "att": self.att}

    @classmethod
    def init(cls, cin, cout, k, S, rng):
        cands = _uniform(rng, (S, cout, cin, k, k), cin * k * k)
        att = _uniform(rng, (S, cin), cin)
        return cls(cands, att)

    def parameter_count(self):
        return self.candidates.size + self.att.size


def vanilla_scores(dc: VanillaDynConv, X) -> np.ndarray:
    X = as_tensor(X, "vanilla_scores input")
    if X.shape[0] != dc.att.shape[1]:
        raise ShapeError(f"vanilla_kernel: input channels {X.shape[0]} != attention head width {dc.att.shape[1]}")
    return softmax(dc.att @ global_avg_pool(X))


def vanilla_kernel(dc: VanillaDynConv, X, pi=None) -> np.ndarray:
    """Sum over s of pi_s(X) W_s. Passing ``pi`` overrides the scores (test mode)."""
    if pi is None:
        pi = vanilla_scores(dc, X)
    pi = np.asarray(pi, dtype=np.float64)
    if pi.shape != (dc.S,):
        raise ShapeError(f"vanilla_kernel: scores shape {pi.shape} != ({dc.S},)")
    return np.tensordot(pi, dc.candidates, axes=1)


def reformulate(candidates):
    """Split candidates into the shared mean kernel and per-candidate offsets."""
    cands = as_tensor(candidates, "reformulate candidates")
    if cands.shape[0] < 1:
        raise ShapeError("reformulate: need at least one candidate")
    W0 = cands.mean(axis=0)
    return W0, cands - W0


def vanilla_attention_forward(p, X):
    """Batched vanilla generator. ``p`` has ``candidates`` and ``att``; X is [N,C,H,W]."""
    g = X.mean(axis=(2, 3))
    logits = g @ p["att"].T
    pi = softmax(logits, axis=1)
    S = p["candidates"].shape[0]
    kernels = np.tensordot(pi, p["candidates"].reshape(S, -1), axes=1)
    kernels = kernels.reshape((X.shape[0],) + p["candidates"].shape[1:])
    k = kernels.shape[-1]
    z, ccache = per_sample_conv_forward(X, kernels, (k - 1) // 2)
    A = sigmoid(z)
    return A, (X.shape, g, pi, ccache, A)


def vanilla_attention_backward(dA, cache, p):
    x_shape, g, pi, ccache, A = cache
    dz = dA * A * (1.0 - A)
    dX, dK = per_sample_conv_backward(dz, ccache)
    S = p["candidates"].shape[0]
    N = dK.shape[0]
    dKf = dK.reshape(N, -1)
    dcands = (pi.T @ dKf).reshape(p["candidates"].shape)
    dpi = dKf @ p["candidates"].reshape(S, -1).T
    dlogits = pi * (dpi - np.sum(dpi * pi, axis=1, keepdims=True))
    datt = dlogits.T @ g
    dg = dlogits @ p["att"]
    dX = dX + global_avg_pool_backward(dg, x_shape)
    return {"candidates": dcands, "att": datt}, dX


# ---------------------------------------------------------------- decomposed


@dataclass(frozen=True)
class DcdcKernelSet:
    """Sample-agnostic kernel, low-rank bases and affinity-MLP weights of one generator."""

    W0: np.ndarray  # [Cout, Cin, k, k]
    P: np.ndarray  # [Cout, L]
    Q: np.ndarray  # [Cin*k*k, L]
    fc1: np.ndarray  # [C/r, C]
    fc2: np.ndarray  # [L*L, C/r]

    def __post_init__(self):
        cout, cin, k, k2 = self.W0.shape
        L = self.P.shape[1]
        if k != k2 or k % 2 == 0:
            raise ShapeError(f"DcdcKernelSet: kernel must be square with odd size, got {k}x{k2}")
        if L < 1:
            raise ShapeError("DcdcKernelSet: latent dimension L must be >= 1")
        if self.P.shape != (cout, L):
            raise ShapeError(f"DcdcKernelSet: P shape {self.P.shape} != (Cout, L)=({cout}, {L})")
        if self.Q.shape != (cin * k * k, L):
            raise ShapeError(f"DcdcKernelSet: Q shape {self.Q.shape} != (Cin*k*k, L)=({cin * k * k}, {L})")
        C = self.fc1.shape[1]
        if C != cin:
            raise ShapeError(f"DcdcKernelSet: fc1 input width {C} != Cin={cin}")
        if self.fc2.shape != (L * L, self.fc1.shape[0]):
            raise ShapeError(f"DcdcKernelSet: fc2 shape {self.fc2.shape} != (L*L, C/r)=({L * L}, {self.fc1.shape[0]})")

    @property
    def L(self):
        return self.P.shape[1]

    @property
    def k(self):
        return self.W0.shape[-1]

    @property
    def r(self):
        return self.fc1.shape[1] // self.fc1.shape[0]

    def params(self):
        return {"W0": self.W0, "P": self.P, "Q": self.Q, "fc1": self.fc1, "fc2": self.fc2}

    @classmethod
    def from_params(cls, p):
        return cls(p["W0"], p["P"], p["Q"], p["fc1"], p["fc2"])

    @classmethod
    def init(cls, cin, cout, k, L, r, rng):
        if cin % r:
            raise ShapeError(f"DcdcKernelSet: channel count C={cin} is not divisible by reduction r={r}")
        hidden = cin // r
        kk = cin * k * k
        return cls(
            W0=_uniform(rng, (cout, cin, k, k), kk),
            P=_uniform(rng, (cout, L), L),
            Q=_uniform(rng, (kk, L), kk),
            fc1=_uniform(rng, (hidden, cin), cin),
            fc2=_uniform(rng, (L * L, hidden), hidden),
        )

    def parameter_count(self):
        return sum(v.size for v in self.params().values())


def affinity(ks: DcdcKernelSet, X) -> np.ndarray:
    """L x L affinity matrix ``reshape(fc2 @ sigmoid(fc1 @ GAP(X)))`` (row-major)."""
    X = as_tensor(X, "affinity input")
    if X.ndim != 3 or X.shape[0] != ks.fc1.shape[1]:
        raise ShapeError(f"affinity: expected [{ks.fc1.shape[1]},H,W] input, got {X.shape}")
    h = sigmoid(ks.fc1 @ global_avg_pool(X))
    return check_finite((ks.fc2 @ h).reshape(ks.L, ks.L), "affinity output")


def assemble_kernel(ks: DcdcKernelSet, phi) -> np.ndarray:
    """``W0 + unflatten(P @ phi @ Q^T)`` for one [L,L] affinity, or a batch [N,L,L]."""
    phi = as_tensor(phi, "assemble_kernel affinity")
    if phi.shape[-2:] != (ks.L, ks.L):
        raise ShapeError(f"assemble_kernel: affinity shape {phi.shape[-2:]} != (L, L)=({ks.L}, {ks.L})")
    delta = np.matmul(np.matmul(ks.P, phi), ks.Q.T)
    return check_finite(ks.W0 + delta.reshape(phi.shape[:-2] + ks.W0.shape), "assemble_kernel output")


def dcdc_forward(ks: DcdcKernelSet, X) -> np.ndarray:
    """M attention maps in (0,1) for a single feature map [C,H,W]."""
    X = as_tensor(X, "dcdc_forward input")
    if X.ndim != 3:
        raise ShapeError(f"dcdc_forward: expected [C,H,W], got {X.shape}")
    A, _ = dcdc_attention_forward(ks.params(), X[None])
    return check_finite(A[0], "dcdc_forward output")


def affinity_forward(p, X):
    """Batched affinity: X [N,C,H,W] -> (phi [N,L,L], cache)."""
    g = X.mean(axis=(2, 3))
    h = sigmoid(g @ p["fc1"].T)
    L = int(round(np.sqrt(p["fc2"].shape[0])))
    return (h @ p["fc2"].T).reshape(-1, L, L), (X.shape, g, h)


def affinity_backward(dphi, cache, p):
    x_shape, g, h = cache
    dphi_f = dphi.reshape(dphi.shape[0], -1)
    dfc2 = dphi_f.T @ h
    dpre = (dphi_f @ p["fc2"]) * h * (1.0 - h)
    dfc1 = dpre.T @ g
    dX = global_avg_pool_backward(dpre @ p["fc1"], x_shape)
    return {"fc1": dfc1, "fc2": dfc2}, dX


def assemble_forward(p, phi):
    """Batched kernels ``W0 + unflatten(P phi_n Q^T)``: phi [N,L,L] -> [N,Cout,Cin,k,k]."""
    delta = np.matmul(np.matmul(p["P"], phi), p["Q"].T)
    cout = p["W0"].shape[0]
    kernels = p["W0"].reshape(cout, -1)[None] + delta
    return kernels.reshape((phi.shape[0],) + p["W0"].shape), phi


def assemble_backward(dK, phi, p):
    N = dK.shape[0]
    cout = p["W0"].shape[0]
    dKf = dK.reshape(N, cout, -1)
    dW0 = dKf.sum(axis=0).reshape(p["W0"].shape)
    phiQt = np.matmul(phi, p["Q"].T)  # [N, L, KK]
    dP = np.einsum("nok,nlk->ol", dKf, phiQt)
    Pphi = np.matmul(p["P"], phi)  # [N, Cout, L]
    dQ = np.einsum("nok,nol->kl", dKf, Pphi)
    dphi = np.matmul(np.matmul(p["P"].T, dKf), p["Q"])
    return {"W0": dW0, "P": dP, "Q": dQ}, dphi


def dcdc_attention_forward(p, X):
    """Batched DCDC generator on X [N,C,H,W]; returns (maps [N,M,H,W], cache)."""
    phi, acache = affinity_forward(p, X)
    kernels, phi = assemble_forward(p, phi)
    k = p["W0"].shape[-1]
    z, ccache = per_sample_conv_forward(X, kernels, (k - 1) // 2)
    A = sigmoid(z)
    return A, (acache, phi, ccache, A)


def dcdc_attention_backward(dA, cache, p):
    acache, phi, ccache, A = cache
    dz = dA * A * (1.0 - A)
    dX, dK = per_sample_conv_backward(dz, ccache)
    grads, dphi = assemble_backward(dK, phi, p)
    agrads, dXa = affinity_backward(dphi, acache, p)
    grads.update(agrads)
    return grads, dX + dXa


# ---------------------------------------------------------------- static


def static_attention_forward(p, X):
    k = p["W0"].shape[-1]
    z, ccache = conv2d_forward(X, p["W0"], None, 1, (k - 1) // 2)
    A = sigmoid(z)
    return A, (ccache, A)


def static_attention_backward(dA, cache, p):
    ccache, A = cache
    dz = dA * A * (1.0 - A)
    dX, dW0, _ = conv2d_backward(dz, ccache)
    return {"W0": dW0}, dX


def init_static(cin, cout, k, rng):
    return {"W0": _uniform(rng, (cout, cin, k, k), cin * k * k)}


GENERATORS = {
    "static": (static_attention_forward, static_attention_backward),
    "vanilla": (vanilla_attention_forward, vanilla_attention_backward),
    "dcdc": (dcdc_attention_forward, dcdc_attention_backward),
}


def init_generator(kind, cin, cout, k, L, r, S, rng):
    if kind == "static":
        return init_static(cin, cout, k, rng)
    if kind == "vanilla":
        return VanillaDynConv.init(cin, cout, k, S, rng).params()
    if kind == "dcdc":
        return DcdcKernelSet.init(cin, cout, k, L, r, rng).params()
    raise ValueError(f"unknown generator kind {kind!r}")


def parameter_counts(cin, cout, k, L, r, S):
    """Parameter counts of the decomposed and vanilla generators at one shape."""
    rng = make_rng(0)
    return (
        DcdcKernelSet.init(cin, cout, k, L, r, rng).parameter_count(),
        VanillaDynConv.init(cin, cout, k, S, rng).parameter_count(),
    )
