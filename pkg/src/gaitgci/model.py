"""Recognition model: per-frame conv backbone, temporal max pooling, factual
attention gating, strip-pooled separate-FC embedding, and the training objective.

Parameters live in a flat ``dict[str, ndarray]``:

``backbone.{i}.weight`` / ``backbone.{i}.bias``
    conv blocks (3x3, leaky ReLU, optional 2x2 max pool)
``fa.*`` / ``cf.*``
    factual / counterfactual attention generators (see :mod:`gaitgci.dcdc`)
``head.fc``
    [B, D, C] per-strip embedding maps
``cls.weight``
    [K, C] classifier shared by the factual and counterfactual likelihoods

Inference touches only ``backbone.*``, ``fa.*`` and ``head.fc``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import dcdc
from .cil import EffectLogits, cross_entropy, likelihood_backward, likelihood_forward, sample_predefined
from .diversity import diversity_loss
from .errors import BatchCompositionError, ShapeError
from .tensor_core import (
    LEAKY_SLOPE,
    as_tensor,
    check_finite,
    conv2d_backward,
    conv2d_forward,
    leaky_relu_backward,
    leaky_relu_forward,
    make_rng,
    max_pool2x2_backward,
    max_pool2x2_forward,
)

GENERATIVE = ("static", "vanilla", "dcdc")
PREDEFINED = ("normal", "uniform")


@dataclass(frozen=True)
class ModelConfig:
    channels: tuple = (32, 64, 128, 128)
    pool: tuple = (True, True, True, False)
    strips: int = 4
    embed_dim: int = 64
    num_classes: int = 4
    M: int = 2
    L: int = 8
    r: int = 4
    kernel: int = 3
    candidates: int = 4
    factual: str = "dcdc"
    counterfactual: str = "dcdc"  # a generator kind, a predefined distribution, or "none"
    slope: float = LEAKY_SLOPE

    def __post_init__(self):
        if len(self.pool) != len(self.channels):
            raise ShapeError(f"ModelConfig: pool flags {self.pool} do not match channel plan {self.channels}")
        if self.factual not in GENERATIVE:
            raise ValueError(f"ModelConfig: unknown factual generator {self.factual!r}")
        if self.counterfactual not in GENERATIVE + PREDEFINED + ("none",):
            raise ValueError(f"ModelConfig: unknown counterfactual generator {self.counterfactual!r}")
        if self.strips < 1 or self.M < 1 or self.L < 1:
            raise ValueError("ModelConfig: strips, M and L must all be >= 1")
        if "dcdc" in (self.factual, self.counterfactual) and self.channels[-1] % self.r:
            raise ShapeError(
                f"ModelConfig: feature channels C={self.channels[-1]} not divisible by reduction r={self.r}"
            )

    @property
    def feature_channels(self):
        return self.channels[-1]

    def feature_extent(self, H, W):
        for p in self.pool:
            if p:
                H, W = H // 2, W // 2
        return H, W


@dataclass
class LossBundle:
    l_cf: float
    l_tri: float
    l_div: float
    lam: float
    total: float = field(init=False)

    def __post_init__(self):
        self.total = self.l_cf + self.l_tri + self.lam * self.l_div


# ---------------------------------------------------------------- init


def _uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: ModelConfig, seed: int) -> dict:
    """Variance-scaled uniform weights (bound sqrt(6/fan_in)); conv biases start at zero.

    Each parameter group draws from its own derived stream so that toggling one
    branch leaves the initial values of every other group unchanged.
    """
    params = {}
    cin = 1
    rng = make_rng(seed, 1)
    for i, c in enumerate(cfg.channels):
        params[f"backbone.{i}.weight"] = _uniform(rng, (c, cin, 3, 3), cin * 9)
        params[f"backbone.{i}.bias"] = np.zeros(c)
        cin = c
    C = cfg.feature_channels
    gen_args = (C, cfg.M, cfg.kernel, cfg.L, cfg.r, cfg.candidates)
    for name, v in dcdc.init_generator(cfg.factual, *gen_args, make_rng(seed, 2)).items():
        params[f"fa.{name}"] = v
    if cfg.counterfactual in GENERATIVE:
        for name, v in dcdc.init_generator(cfg.counterfactual, *gen_args, make_rng(seed, 3)).items():
            params[f"cf.{name}"] = v
    rng = make_rng(seed, 4)
    params["head.fc"] = _uniform(rng, (cfg.strips, cfg.embed_dim, C), 2 * C)
    params["cls.weight"] = _uniform(make_rng(seed, 5), (cfg.num_classes, C), C)
    return params


def group(params, prefix):
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}


# ---------------------------------------------------------------- backbone


def backbone_batch_forward(params, cfg: ModelConfig, frames):
    """frames [B,1,H,W] -> ([B,C,h,w], caches)."""
    x = frames
    caches = []
    for i, pool in enumerate(cfg.pool):
        z, ccache = conv2d_forward(x, params[f"backbone.{i}.weight"], params[f"backbone.{i}.bias"], 1, 1)
        a, acache = leaky_relu_forward(z, cfg.slope)
        pcache = None
        if pool:
            if a.shape[2] < 2 or a.shape[3] < 2:
                raise ShapeError(f"backbone: block {i} feature {a.shape[2]}x{a.shape[3]} too small to pool")
            a, pcache = max_pool2x2_forward(a)
        caches.append((ccache, acache, pcache))
        x = a
    if x.shape[2] < 4 or x.shape[3] < 2:
        raise ShapeError(
            f"backbone: output spatial extent {x.shape[2]}x{x.shape[3]} is below the 4x2 minimum; "
            f"input frames {frames.shape[2]}x{frames.shape[3]} are too small"
        )
    return x, caches


def backbone_batch_backward(dout, caches, grads):
    d = dout
    for i in range(len(caches) - 1, -1, -1):
        ccache, acache, pcache = caches[i]
        if pcache is not None:
            d = max_pool2x2_backward(d, pcache)
        d = leaky_relu_backward(d, acache)
        d, dw, db = conv2d_backward(d, ccache)
        grads[f"backbone.{i}.weight"] = dw
        grads[f"backbone.{i}.bias"] = db
    return d


def backbone_forward(params, cfg: ModelConfig, seq) -> np.ndarray:
    """Apply the conv blocks to every frame of ``seq`` [T,1,H,W] -> [T,C,H',W']."""
    seq = as_tensor(seq, "backbone input")
    if seq.ndim != 4 or seq.shape[1] != 1 or seq.shape[0] < 1:
        raise ShapeError(f"backbone_forward: expected [T,1,H,W] with T >= 1, got {seq.shape}")
    out, _ = backbone_batch_forward(params, cfg, seq)
    return check_finite(out, "backbone output")


# ---------------------------------------------------------------- pooling / embedding


def temporal_pool_forward(feat):
    """Max over axis 1 of [N,T,C,h,w]."""
    idx = np.argmax(feat, axis=1)
    out = np.take_along_axis(feat, idx[:, None], axis=1)[:, 0]
    return out, (idx, feat.shape)


def temporal_pool_backward(dout, cache):
    idx, shape = cache
    d = np.zeros(shape)
    np.put_along_axis(d, idx[:, None], dout[:, None], axis=1)
    return d


def temporal_pool(feat) -> np.ndarray:
    """Elementwise max over the frame axis: [T,C,H,W] -> [C,H,W]."""
    feat = as_tensor(feat, "temporal_pool input")
    if feat.ndim != 4 or feat.shape[0] < 1:
        raise ShapeError(f"temporal_pool: expected [T,C,H,W] with T >= 1, got {feat.shape}")
    return feat.max(axis=0)


def strip_pool_forward(F, B):
    N, C, h, w = F.shape
    if h % B:
        raise ShapeError(f"embed: feature height {h} is not divisible into {B} strips")
    s = F.reshape(N, C, B, (h // B) * w)
    idx = np.argmax(s, axis=3)
    mx = np.take_along_axis(s, idx[..., None], axis=3)[..., 0]
    pooled = s.mean(axis=3) + mx
    return pooled.transpose(0, 2, 1), (idx, F.shape, B)


def strip_pool_backward(dpooled, cache):
    idx, shape, B = cache
    N, C, h, w = shape
    cells = (h // B) * w
    dp = dpooled.transpose(0, 2, 1)
    ds = np.repeat(dp[..., None] / cells, cells, axis=3)
    np.put_along_axis(ds, idx[..., None], np.take_along_axis(ds, idx[..., None], axis=3) + dp[..., None], axis=3)
    return ds.reshape(shape)


def embed_forward(F, head_fc):
    """Strip mean+max pooling then per-strip linear maps: [N,C,h,w] -> [N,B,D]."""
    pooled, pcache = strip_pool_forward(F, head_fc.shape[0])
    emb = np.einsum("bdc,nbc->nbd", head_fc, pooled)
    return emb, (pooled, pcache)


def embed_backward(demb, cache, head_fc):
    pooled, pcache = cache
    dhead = np.einsum("nbd,nbc->bdc", demb, pooled)
    dpooled = np.einsum("nbd,bdc->nbc", demb, head_fc)
    return strip_pool_backward(dpooled, pcache), dhead


def embed(feat, head) -> np.ndarray:
    """Separate-FC embedding of one feature map [C,H,W] with ``head`` [B,D,C] -> [B,D]."""
    feat = as_tensor(feat, "embed input")
    head = as_tensor(head, "embedding head")
    if feat.ndim != 3 or head.ndim != 3 or head.shape[2] != feat.shape[0]:
        raise ShapeError(f"embed: feature {feat.shape} incompatible with head {head.shape}")
    emb, _ = embed_forward(feat[None], head)
    return check_finite(emb[0], "embed output")


# ---------------------------------------------------------------- triplet


def check_batch_composition(labels):
    labels = np.asarray(labels)
    ids, counts = np.unique(labels, return_counts=True)
    if ids.size < 2:
        raise BatchCompositionError(f"triplet_loss: batch needs >= 2 identities, got {ids.size}")
    if counts.min() < 2:
        bad = ids[np.argmin(counts)]
        raise BatchCompositionError(f"triplet_loss: identity {bad} has only {counts.min()} sample in the batch")


def triplet_forward(emb, labels, margin):
    """Batch-hard triplet loss per strip; returns (loss, cache)."""
    labels = np.asarray(labels)
    check_batch_composition(labels)
    N = emb.shape[0]
    diff = emb[:, None] - emb[None, :]  # [N,N,B,D]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))  # [N,N,B]
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(N, dtype=bool)
    neg = ~same
    dpos = np.where(pos[..., None], dist, -np.inf)
    dneg = np.where(neg[..., None], dist, np.inf)
    ip = np.argmax(dpos, axis=1)  # [N,B]
    ineg = np.argmin(dneg, axis=1)
    hp = np.take_along_axis(dist, ip[:, None], axis=1)[:, 0]
    hn = np.take_along_axis(dist, ineg[:, None], axis=1)[:, 0]
    l = np.maximum(0.0, hp - hn + margin)
    active = l > 0
    count = int(active.sum())
    loss = float(l[active].sum() / count) if count else 0.0
    return loss, (diff, dist, ip, ineg, active, count)


def triplet_backward(cache, scale=1.0):
    diff, dist, ip, ineg, active, count = cache
    N, _, B, D = diff.shape
    demb = np.zeros((N, B, D))
    if not count:
        return demb
    w = scale / count
    a_idx, b_idx = np.nonzero(active)
    for sel, sign in ((ip, 1.0), (ineg, -1.0)):
        j = sel[a_idx, b_idx]
        dd = dist[a_idx, j, b_idx]
        unit = np.zeros((a_idx.size, D))
        nz = dd > 0
        unit[nz] = diff[a_idx[nz], j[nz], b_idx[nz]] / dd[nz, None]
        np.add.at(demb, (a_idx, b_idx), sign * w * unit)
        np.add.at(demb, (j, b_idx), -sign * w * unit)
    return demb


def triplet_loss(embeddings, labels, margin: float = 0.2) -> float:
    """Batch-hard triplet loss over [N,B,D] embeddings.

    Hinge ``max(0, d(a,p_hard) - d(a,n_hard) + margin)`` per anchor and strip,
    averaged over the terms that are nonzero (0 if none are).
    """
    emb = as_tensor(embeddings, "triplet_loss embeddings")
    if emb.ndim != 3:
        raise ShapeError(f"triplet_loss: expected [N,B,D], got {emb.shape}")
    if len(labels) != emb.shape[0]:
        raise ShapeError(f"triplet_loss: {len(labels)} labels for {emb.shape[0]} embeddings")
    loss, _ = triplet_forward(emb, labels, margin)
    return loss


def total_loss(e: EffectLogits, y, embeddings, labels, bases: dict, lam: float = 0.1, margin: float = 0.2) -> LossBundle:
    """Counterfactual CE on the effect logits + batch-hard triplet + lam * diversity."""
    if lam < 0:
        raise ValueError(f"total_loss: lambda must be >= 0, got {lam}")
    ye = np.atleast_2d(e.y_e)
    l_cf, _ = cross_entropy(ye, np.atleast_1d(y))
    l_tri = triplet_loss(embeddings, labels, margin)
    l_div = diversity_loss(**bases).value
    return LossBundle(l_cf, l_tri, l_div, lam)


# ---------------------------------------------------------------- generators


def _generator_forward(kind, p, X):
    fwd, _ = dcdc.GENERATORS[kind]
    return fwd(p, X)


def _generator_backward(kind, dA, cache, p):
    _, bwd = dcdc.GENERATORS[kind]
    return bwd(dA, cache, p)


def _bases(params, cfg: ModelConfig):
    b = {}
    if cfg.factual == "dcdc":
        b["P_A"], b["Q_A"] = params["fa.P"], params["fa.Q"]
    if cfg.counterfactual == "dcdc":
        b["P_C"], b["Q_C"] = params["cf.P"], params["cf.Q"]
    return b


_BASIS_PARAM = {"P_A": "fa.P", "Q_A": "fa.Q", "P_C": "cf.P", "Q_C": "cf.Q"}


def basis_norms(params, cfg: ModelConfig) -> dict:
    return diversity_loss(**_bases(params, cfg)).norms


# ---------------------------------------------------------------- full model


@dataclass
class Forward:
    X: np.ndarray
    A: np.ndarray
    C: np.ndarray | None
    logits: EffectLogits
    emb: np.ndarray


def sequence_features(params, cfg: ModelConfig, seqs):
    """seqs [N,T,1,H,W] -> (X [N,C,h,w], caches)."""
    N, T = seqs.shape[:2]
    feat, bcache = backbone_batch_forward(params, cfg, seqs.reshape((N * T,) + seqs.shape[2:]))
    feat = feat.reshape((N, T) + feat.shape[1:])
    X, tcache = temporal_pool_forward(feat)
    return X, (bcache, tcache, feat.shape)


def model_loss(
    params,
    cfg: ModelConfig,
    seqs,
    labels,
    *,
    lam: float = 0.1,
    margin: float = 0.2,
    cil_on: bool = True,
    dc_on: bool = True,
    cf_maps=None,
    rng=None,
    cf_detach: bool = False,
    need_grads: bool = True,
):
    """Forward the batch, assemble the loss bundle, and backpropagate.

    ``cil_on=False`` trains the classifier with plain CE on the factual logits.
    A predefined counterfactual is sampled from ``rng`` unless ``cf_maps`` is given.
    ``cf_detach`` stops all gradient through the counterfactual likelihood.
    Returns ``(LossBundle, grads, Forward)``; grads is ``None`` if not requested.
    """
    labels = np.asarray(labels, dtype=np.int64)
    X, fcache = sequence_features(params, cfg, seqs)

    fa = group(params, "fa")
    A, acache = _generator_forward(cfg.factual, fa, X)
    y_f, lf_cache = likelihood_forward(X, A, params["cls.weight"])

    use_cf = cil_on and cfg.counterfactual != "none"
    C = ccache = None
    if use_cf:
        if cfg.counterfactual in GENERATIVE:
            cf = group(params, "cf")
            C, ccache = _generator_forward(cfg.counterfactual, cf, X)
        elif cf_maps is not None:
            C = np.asarray(cf_maps, dtype=np.float64)
        else:
            if rng is None:
                raise ValueError("model_loss: a predefined counterfactual needs an rng or explicit cf_maps")
            C = sample_predefined(A.shape, cfg.counterfactual, rng)
        y_cf, lc_cache = likelihood_forward(X, C, params["cls.weight"])
    else:
        y_cf = np.zeros_like(y_f)
    logits = EffectLogits.from_pair(y_f, y_cf)

    abar = A.mean(axis=1)
    F = X * abar[:, None]
    emb, ecache = embed_forward(F, params["head.fc"])

    l_cf, dlogits = cross_entropy(logits.y_e if use_cf else y_f, labels)
    l_tri, tcache = triplet_forward(emb, labels, margin)
    eff_lam = lam if dc_on else 0.0
    div = diversity_loss(**_bases(params, cfg))
    bundle = LossBundle(l_cf, l_tri, div.value, eff_lam)
    check_finite(np.array([bundle.total]), "total loss")
    fw = Forward(X, A, C, logits, emb)
    if not need_grads:
        return bundle, None, fw

    grads = {}
    dX, dA, dW = likelihood_backward(dlogits, lf_cache, params["cls.weight"])
    grads["cls.weight"] = dW
    dC = None
    if use_cf and not cf_detach:
        dXc, dC, dWc = likelihood_backward(-dlogits, lc_cache, params["cls.weight"])
        dX = dX + dXc
        grads["cls.weight"] = grads["cls.weight"] + dWc

    demb = triplet_backward(tcache)
    dF, grads["head.fc"] = embed_backward(demb, ecache, params["head.fc"])
    dX = dX + dF * abar[:, None]
    dA = dA + (np.sum(dF * X, axis=1) / A.shape[1])[:, None]

    gfa, dXa = _generator_backward(cfg.factual, dA, acache, fa)
    dX = dX + dXa
    for k, v in gfa.items():
        grads[f"fa.{k}"] = v
    if cfg.counterfactual in GENERATIVE:
        cf = group(params, "cf")
        if ccache is not None and dC is not None:
            gcf, dXcf = _generator_backward(cfg.counterfactual, dC, ccache, cf)
            dX = dX + dXcf
        else:
            gcf = {k: np.zeros_like(v) for k, v in cf.items()}
        for k, v in gcf.items():
            grads[f"cf.{k}"] = v

    if eff_lam:
        for name, g in div.grads.items():
            grads[_BASIS_PARAM[name]] = grads[_BASIS_PARAM[name]] + eff_lam * g

    bcache, tpcache, feat_shape = fcache
    dfeat = temporal_pool_backward(dX, tpcache)
    N, T = feat_shape[:2]
    backbone_batch_backward(dfeat.reshape((N * T,) + feat_shape[2:]), bcache, grads)
    return bundle, grads, fw


# ---------------------------------------------------------------- inference


def factual_maps(params, cfg: ModelConfig, seq):
    """Factual attention [M,h,w] and pooled feature [C,h,w] for one sequence [T,1,H,W]."""
    seq = as_tensor(seq, "sequence")
    X, _ = sequence_features(params, cfg, seq[None])
    A, _ = _generator_forward(cfg.factual, group(params, "fa"), X)
    return A[0], X[0]


def counterfactual_maps(params, cfg: ModelConfig, seq, rng=None):
    seq = as_tensor(seq, "sequence")
    X, _ = sequence_features(params, cfg, seq[None])
    if cfg.counterfactual in GENERATIVE:
        C, _ = _generator_forward(cfg.counterfactual, group(params, "cf"), X)
        return C[0]
    if cfg.counterfactual in PREDEFINED:
        shape = (cfg.M,) + X.shape[2:]
        return sample_predefined(shape, cfg.counterfactual, rng if rng is not None else make_rng(0))
    return None


def sequence_embedding(params, cfg: ModelConfig, seq) -> np.ndarray:
    """Inference embedding [B,D] of one sequence; uses the factual branch only."""
    A, X = factual_maps(params, cfg, seq)
    F = X * A.mean(axis=0)[None]
    emb, _ = embed_forward(F[None], params["head.fc"])
    return check_finite(emb[0], "embedding")


def inference_params(params) -> dict:
    """The subset of parameters read by :func:`sequence_embedding`."""
    return {k: v for k, v in params.items() if k.startswith(("backbone.", "fa.", "head."))}


def with_switches(cfg: ModelConfig, *, cil_on=True, gfa_on=True, gca_on=True, md_on=True, cf_dist="normal"):
    dyn = "dcdc" if md_on else "vanilla"
    return replace(
        cfg,
        factual=dyn if gfa_on else "static",
        counterfactual=(dyn if gca_on else cf_dist) if cil_on else "none",
    )
