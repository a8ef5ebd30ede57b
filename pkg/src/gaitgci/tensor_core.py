"""Dense float64 primitives with explicit backward passes.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Every public op
validates shapes, refuses non-finite input or output, and never mutates its
arguments. Ops that participate in training come in ``*_forward`` /
``*_backward`` pairs; the forward returns ``(out, cache)`` and the backward
maps an upstream gradient plus that cache to input gradients.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteError, ShapeError, SvdConvergenceError

LEAKY_SLOPE = 0.01


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim == 0:
        raise ShapeError(f"{name}: expected at least one dimension, got a scalar")
    return arr


def check_finite(arr, where: str):
    """Raise NonFiniteError if ``arr`` holds NaN or Inf; returns ``arr``."""
    a = np.asarray(arr)
    if not np.all(np.isfinite(a)):
        bad = np.argwhere(~np.isfinite(a))
        idx = tuple(int(i) for i in bad[0]) if a.ndim else ()
        raise NonFiniteError(f"{where}: non-finite value at index {idx}")
    return arr


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """PCG64 generator seeded through ``SeedSequence([seed, *stream])``.

    PCG64 plus SeedSequence is a fixed, documented algorithm in numpy, so equal
    arguments give equal streams on every platform. ``stream`` derives
    independent per-sample or per-purpose generators from one run seed.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(s) for s in stream]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


# ---------------------------------------------------------------- activations


def sigmoid(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    check_finite(v, "sigmoid input")
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def softmax(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    check_finite(v, "softmax input")
    z = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    z = v - np.max(v, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def leaky_relu_forward(x, slope: float = LEAKY_SLOPE):
    mask = x > 0
    return np.where(mask, x, slope * x), (mask, slope)


def leaky_relu_backward(dout, cache):
    mask, slope = cache
    return np.where(mask, dout, slope * dout)


# ---------------------------------------------------------------- convolution


def _out_extent(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """[B,C,H,W] -> [B, C*k*k, H'*W'] with row index ``c*k*k + i*k + j``."""
    B, C, H, W = x.shape
    Ho, Wo = _out_extent(H, k, stride, pad), _out_extent(W, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((B, C, k, k, Ho, Wo))
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
    return cols.reshape(B, C * k * k, Ho * Wo)


def col2im(cols: np.ndarray, x_shape, k: int, stride: int, pad: int) -> np.ndarray:
    B, C, H, W = x_shape
    Ho, Wo = _out_extent(H, k, stride, pad), _out_extent(W, k, stride, pad)
    cols = cols.reshape(B, C, k, k, Ho, Wo)
    xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
    for i in range(k):
        for j in range(k):
            xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += cols[:, :, i, j]
    if pad:
        return xp[:, :, pad:pad + H, pad:pad + W]
    return xp


def _check_conv_args(x: np.ndarray, kernel: np.ndarray, stride: int, pad: int):
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be [Cout,Cin,k,k], got shape {kernel.shape}")
    cout, cin, k, k2 = kernel.shape
    if k != k2:
        raise ShapeError(f"conv2d: kernel height {k} != kernel width {k2}")
    if k % 2 == 0:
        raise ShapeError(f"conv2d: kernel size k={k} must be odd")
    if x.shape[-3] != cin:
        raise ShapeError(f"conv2d: input channels {x.shape[-3]} != kernel in-channels {cin}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride={stride} must be >= 1")
    if pad < 0:
        raise ShapeError(f"conv2d: pad={pad} must be >= 0")
    H, W = x.shape[-2:]
    if H + 2 * pad < k:
        raise ShapeError(f"conv2d: input height {H} + 2*pad < kernel size {k}")
    if W + 2 * pad < k:
        raise ShapeError(f"conv2d: input width {W} + 2*pad < kernel size {k}")


def conv2d_forward(x, kernel, bias=None, stride: int = 1, pad: int = 0):
    """Batched cross-correlation. ``x`` is [B,Cin,H,W]; returns ([B,Cout,H',W'], cache)."""
    _check_conv_args(x, kernel, stride, pad)
    B = x.shape[0]
    cout, _, k, _ = kernel.shape
    Ho = _out_extent(x.shape[2], k, stride, pad)
    Wo = _out_extent(x.shape[3], k, stride, pad)
    cols = im2col(x, k, stride, pad)
    wf = kernel.reshape(cout, -1)
    out = np.matmul(wf, cols)
    if bias is not None:
        out += bias[None, :, None]
    return out.reshape(B, cout, Ho, Wo), (cols, x.shape, kernel, stride, pad, bias is not None)


def conv2d_backward(dout, cache):
    """Returns (dx, dkernel, dbias); dbias is None when the forward had no bias."""
    cols, x_shape, kernel, stride, pad, has_bias = cache
    cout, _, k, _ = kernel.shape
    B = dout.shape[0]
    d2 = dout.reshape(B, cout, -1)
    dk = np.tensordot(d2, cols, axes=([0, 2], [0, 2])).reshape(kernel.shape)
    dcols = np.matmul(kernel.reshape(cout, -1).T, d2)
    dx = col2im(dcols, x_shape, k, stride, pad)
    db = d2.sum(axis=(0, 2)) if has_bias else None
    return dx, dk, db


def conv2d(input, kernel, stride: int = 1, pad: int = 0, bias=None) -> np.ndarray:
    """Cross-correlation of ``input`` [Cin,H,W] (or [B,Cin,H,W]) with ``kernel`` [Cout,Cin,k,k].

    Zero padding, no kernel flip. Output extent is ``floor((H+2*pad-k)/stride)+1``.
    """
    x = as_tensor(input, "conv2d input")
    w = as_tensor(kernel, "conv2d kernel")
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv2d: input must be [Cin,H,W] or [B,Cin,H,W], got shape {x.shape}")
    check_finite(x, "conv2d input")
    check_finite(w, "conv2d kernel")
    b = None if bias is None else as_tensor(bias, "conv2d bias")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias shape {b.shape} != (Cout,)=({w.shape[0]},)")
    single = x.ndim == 3
    out, _ = conv2d_forward(x[None] if single else x, w, b, stride, pad)
    out = out[0] if single else out
    return check_finite(out, "conv2d output")


def per_sample_conv_forward(x, kernels, pad: int):
    """Stride-1 conv where sample ``n`` of ``x`` [N,C,H,W] uses ``kernels[n]`` [M,C,k,k]."""
    N = x.shape[0]
    _check_conv_args(x, kernels[0], 1, pad)
    m, _, k, _ = kernels.shape[1:]
    cols = im2col(x, k, 1, pad)
    kf = kernels.reshape(N, m, -1)
    out = np.matmul(kf, cols)
    Ho = _out_extent(x.shape[2], k, 1, pad)
    Wo = _out_extent(x.shape[3], k, 1, pad)
    return out.reshape(N, m, Ho, Wo), (cols, x.shape, kernels, pad)


def per_sample_conv_backward(dout, cache):
    cols, x_shape, kernels, pad = cache
    N, m = kernels.shape[:2]
    k = kernels.shape[-1]
    d2 = dout.reshape(N, m, -1)
    dk = np.matmul(d2, cols.transpose(0, 2, 1)).reshape(kernels.shape)
    dcols = np.matmul(kernels.reshape(N, m, -1).transpose(0, 2, 1), d2)
    return col2im(dcols, x_shape, k, 1, pad), dk


# ---------------------------------------------------------------- pooling


def global_avg_pool(X) -> np.ndarray:
    """Per-channel spatial mean of [C,H,W] (or [N,C,H,W]) -> [C] (or [N,C])."""
    x = as_tensor(X, "global_avg_pool input")
    if x.ndim not in (3, 4):
        raise ShapeError(f"global_avg_pool: expected [C,H,W] or [N,C,H,W], got {x.shape}")
    if x.shape[-1] == 0 or x.shape[-2] == 0:
        raise ShapeError(f"global_avg_pool: empty spatial extent {x.shape[-2:]}")
    check_finite(x, "global_avg_pool input")
    return x.mean(axis=(-2, -1))


def global_avg_pool_backward(dout, x_shape):
    H, W = x_shape[-2:]
    return np.broadcast_to(dout[..., None, None] / (H * W), x_shape).copy()


def max_pool2x2_forward(x):
    """2x2 / stride-2 max pool over the last two axes of [B,C,H,W]; odd edges are dropped."""
    B, C, H, W = x.shape
    Ho, Wo = H // 2, W // 2
    if Ho == 0 or Wo == 0:
        raise ShapeError(f"max_pool2x2: spatial extent {H}x{W} too small to pool")
    win = x[:, :, :2 * Ho, :2 * Wo].reshape(B, C, Ho, 2, Wo, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(B, C, Ho, Wo, 4)
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape)


def max_pool2x2_backward(dout, cache):
    idx, x_shape = cache
    B, C, H, W = x_shape
    Ho, Wo = dout.shape[2:]
    win = np.zeros((B, C, Ho, Wo, 4))
    np.put_along_axis(win, idx[..., None], dout[..., None], axis=-1)
    win = win.reshape(B, C, Ho, Wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, 2 * Ho, 2 * Wo)
    dx = np.zeros(x_shape)
    dx[:, :, :2 * Ho, :2 * Wo] = win
    return dx


# ---------------------------------------------------------------- SVD


@dataclass(frozen=True)
class SvdResult:
    U: np.ndarray  # [m, r]
    S: np.ndarray  # [r], descending, non-negative
    V: np.ndarray  # [n, r]


def _complete_orthonormal(U: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Replace the columns of ``U`` not flagged in ``keep`` by an orthonormal completion."""
    m, r = U.shape
    basis = [U[:, j] for j in range(r) if keep[j]]
    out = U.copy()
    e = np.eye(m)
    for j in range(r):
        if keep[j]:
            continue
        best, best_norm = None, -1.0
        for i in range(m):
            v = e[i].copy()
            for _ in range(2):
                for b in basis:
                    v -= (b @ v) * b
            nv = np.linalg.norm(v)
            if nv > best_norm + 1e-12:
                best, best_norm = v, nv
        best = best / best_norm
        out[:, j] = best
        basis.append(best)
    return out


def thin_svd(W, max_sweeps: int = 60) -> SvdResult:
    """Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Returns ``U`` [m,r], ``S`` [r], ``V`` [n,r] with r = min(m,n), S descending.
    Columns of U belonging to numerically zero singular values are completed to an
    orthonormal set. Signs are fixed so the first nonzero entry of every column of
    U is positive (V is flipped along with it).
    """
    W = as_tensor(W, "thin_svd input")
    if W.ndim != 2:
        raise ShapeError(f"thin_svd: expected a matrix, got shape {W.shape}")
    m, n = W.shape
    if m < 1 or n < 1:
        raise ShapeError(f"thin_svd: empty matrix of shape {W.shape}")
    check_finite(W, "thin_svd input")

    transposed = m < n
    A = (W.T if transposed else W).copy()
    rows, cols = A.shape
    V = np.eye(cols)
    eps = np.finfo(np.float64).eps
    tol = rows * eps
    fro = np.linalg.norm(A)
    floor = (eps * fro) ** 2

    off = 0.0
    for sweep in range(1, max_sweeps + 1):
        off = 0.0
        rotated = False
        for p in range(cols - 1):
            for q in range(p + 1, cols):
                ap, aq = A[:, p], A[:, q]
                alpha, beta, gamma = ap @ ap, aq @ aq, ap @ aq
                scale = np.sqrt(alpha * beta)
                if scale <= floor:
                    continue
                cosine = abs(gamma) / scale
                off = max(off, cosine)
                if cosine <= tol:
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                t = (1.0 if zeta >= 0 else -1.0) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                A[:, p], A[:, q] = c * ap - s * aq, s * ap + c * aq
                vp, vq = V[:, p].copy(), V[:, q].copy()
                V[:, p], V[:, q] = c * vp - s * vq, s * vp + c * vq
                rotated = True
        if not rotated or off <= tol:
            break
    else:
        raise SvdConvergenceError(max_sweeps, off)

    S = np.linalg.norm(A, axis=0)
    order = np.argsort(-S, kind="stable")
    S, A, V = S[order], A[:, order], V[:, order]
    smax = S[0] if S.size else 0.0
    keep = S > max(rows, cols) * eps * smax if smax > 0 else np.zeros(cols, dtype=bool)
    U = np.zeros_like(A)
    U[:, keep] = A[:, keep] / S[keep]
    if not np.all(keep):
        U = _complete_orthonormal(U, keep)

    if transposed:
        U, V = V, U
    for j in range(U.shape[1]):
        nz = np.flatnonzero(np.abs(U[:, j]) > 1e-12)
        if nz.size and U[nz[0], j] < 0:
            U[:, j] = -U[:, j]
            V[:, j] = -V[:, j]
    return SvdResult(U=U, S=S, V=V)
