"""Central-difference verification of explicit backward passes.

An op is a :class:`DiffOp`: ``forward(args) -> scalar | ndarray`` and
``backward(args, dout) -> {name: grad}`` over a dict of named float64 arrays.
Tensor-valued forwards are reduced to a scalar through a fixed random linear
functional ``sum(R * out)``, and ``backward`` is called with ``dout = R``.

The error for one argument is the largest coordinate discrepancy divided by that
argument's gradient scale, ``max(|analytic|_inf, |numeric|_inf, 1e-8)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import NonFiniteError
from .tensor_core import make_rng


@dataclass
class DiffOp:
    name: str
    forward: Callable
    backward: Callable


@dataclass
class GradReport:
    name: str
    eps: float
    rel_tol: float
    max_rel: dict = field(default_factory=dict)
    max_abs: dict = field(default_factory=dict)
    passed: bool = True

    def line(self) -> str:
        worst = max(self.max_rel.values()) if self.max_rel else 0.0
        status = "PASS" if self.passed else "FAIL"
        failing = [k for k, v in self.max_rel.items() if not v < self.rel_tol]
        tail = f" failing={','.join(failing)}" if failing else ""
        return f"{status} {self.name:<28} max_rel={worst:.3e} params={len(self.max_rel)}{tail}"


def _scalarize(out, rng):
    out = np.asarray(out, dtype=np.float64)
    if out.ndim == 0:
        return float(out), None
    R = rng.standard_normal(out.shape)
    return float(np.sum(R * out)), R


def finite_diff_check(
    op: DiffOp,
    params: dict,
    inputs: dict | None = None,
    eps: float = 1e-5,
    rel_tol: float = 1e-4,
    seed: int = 0,
    max_coords: int | None = None,
) -> GradReport:
    """Compare ``op.backward`` against central differences for every argument.

    ``max_coords`` caps the number of probed coordinates per argument (a seeded
    random subset); ``None`` probes them all.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"finite_diff_check: eps={eps} outside [1e-7, 1e-4]")
    args = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    if inputs:
        args.update({k: np.array(v, dtype=np.float64) for k, v in inputs.items()})

    out = op.forward(args)
    base, R = _scalarize(out, make_rng(seed, 101))

    def f(a):
        v = op.forward(a)
        v = float(v) if R is None else float(np.sum(R * np.asarray(v)))
        return v

    analytic = op.backward(args, 1.0 if R is None else R)
    report = GradReport(op.name, eps, rel_tol)
    pick = make_rng(seed, 202)
    for name, arr in args.items():
        ga = np.asarray(analytic.get(name, np.zeros_like(arr)), dtype=np.float64)
        if ga.shape != arr.shape:
            raise ValueError(f"{op.name}: gradient for {name!r} has shape {ga.shape}, expected {arr.shape}")
        flat = arr.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(pick.choice(flat.size, size=max_coords, replace=False))
        gn = np.zeros(coords.size)
        for n, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(args)
            flat[i] = orig - eps
            fm = f(args)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                idx = [int(j) for j in np.unravel_index(i, arr.shape)]
                raise NonFiniteError(f"{op.name}: non-finite forward when probing {name}{idx}")
            gn[n] = (fp - fm) / (2.0 * eps)
        ga_sel = ga.reshape(-1)[coords]
        err = np.abs(ga_sel - gn)
        scale = max(np.max(np.abs(ga_sel), initial=0.0), np.max(np.abs(gn), initial=0.0), 1e-8)
        report.max_abs[name] = float(np.max(err, initial=0.0))
        report.max_rel[name] = float(np.max(err, initial=0.0) / scale)
    report.passed = all(v < rel_tol for v in report.max_rel.values())
    return report


# ---------------------------------------------------------------- registry


def _distinct_spectrum(rng, shape, gap=1e-3):
    from .tensor_core import thin_svd

    while True:
        W = rng.standard_normal(shape)
        S = thin_svd(W).S
        if np.all(np.diff(-S) > gap) and S[-1] > gap:
            return W


def _conv_case(rng):
    from .tensor_core import conv2d_backward, conv2d_forward

    def fwd(a):
        return conv2d_forward(a["x"], a["w"], a["b"], 1, 1)[0]

    def bwd(a, d):
        _, cache = conv2d_forward(a["x"], a["w"], a["b"], 1, 1)
        dx, dw, db = conv2d_backward(d, cache)
        return {"x": dx, "w": dw, "b": db}

    args = {"x": rng.standard_normal((2, 3, 6, 5)), "w": rng.standard_normal((4, 3, 3, 3)), "b": rng.standard_normal(4)}
    return DiffOp("conv2d", fwd, bwd), args


def _gap_case(rng):
    from .tensor_core import global_avg_pool, global_avg_pool_backward

    def fwd(a):
        return global_avg_pool(a["x"])

    def bwd(a, d):
        return {"x": global_avg_pool_backward(d, a["x"].shape)}

    return DiffOp("global_avg_pool", fwd, bwd), {"x": rng.standard_normal((2, 4, 5, 3))}


def _affinity_case(rng):
    from . import dcdc

    C, r, L = 8, 4, 3

    def fwd(a):
        return dcdc.affinity_forward(a, a["x"])[0]

    def bwd(a, d):
        _, cache = dcdc.affinity_forward(a, a["x"])
        g, dx = dcdc.affinity_backward(d, cache, a)
        return {**g, "x": dx}

    args = {
        "fc1": rng.standard_normal((C // r, C)),
        "fc2": rng.standard_normal((L * L, C // r)),
        "x": rng.standard_normal((2, C, 4, 3)),
    }
    return DiffOp("affinity", fwd, bwd), args


def _assemble_case(rng):
    from . import dcdc

    cout, cin, k, L = 3, 2, 3, 3

    def fwd(a):
        return dcdc.assemble_forward(a, a["phi"])[0]

    def bwd(a, d):
        g, dphi = dcdc.assemble_backward(d, a["phi"], a)
        return {**g, "phi": dphi}

    args = {
        "W0": rng.standard_normal((cout, cin, k, k)),
        "P": rng.standard_normal((cout, L)),
        "Q": rng.standard_normal((cin * k * k, L)),
        "phi": rng.standard_normal((2, L, L)),
    }
    return DiffOp("assemble_kernel", fwd, bwd), args


def _generator_case(kind):
    def build(rng):
        from . import dcdc

        C, M = 4, 2
        p = dcdc.init_generator(kind, C, M, 3, 3, 2, 3, rng)
        fwd_fn, bwd_fn = dcdc.GENERATORS[kind]

        def fwd(a):
            return fwd_fn(a, a["x"])[0]

        def bwd(a, d):
            _, cache = fwd_fn(a, a["x"])
            g, dx = bwd_fn(d, cache, a)
            return {**g, "x": dx}

        return DiffOp(f"generator[{kind}]", fwd, bwd), {**p, "x": rng.standard_normal((2, C, 4, 3))}

    return build


def _nuclear_case(rng):
    from . import diversity

    def fwd(a):
        return diversity.nuclear_norm(a["W"])

    def bwd(a, d):
        return {"W": d * diversity.nuclear_norm_grad(a["W"])}

    return DiffOp("nuclear_norm", fwd, bwd), {"W": _distinct_spectrum(rng, (6, 4))}


def _diversity_case(rng):
    from . import diversity

    def fwd(a):
        return diversity.diversity_loss(**a).value

    def bwd(a, d):
        return {k: d * v for k, v in diversity.diversity_loss(**a).grads.items()}

    args = {
        "P_A": _distinct_spectrum(rng, (2, 4)),
        "Q_A": _distinct_spectrum(rng, (9, 4)),
        "P_C": _distinct_spectrum(rng, (2, 4)),
        "Q_C": _distinct_spectrum(rng, (9, 4)),
    }
    return DiffOp("diversity_loss", fwd, bwd), args


def _cf_ce_case(rng):
    from .cil import cross_entropy, likelihood_backward, likelihood_forward

    N, C, M, K = 3, 4, 2, 5
    labels = rng.integers(0, K, size=N)

    def fwd(a):
        yf, _ = likelihood_forward(a["x"], a["A"], a["W"])
        ycf, _ = likelihood_forward(a["x"], a["C"], a["W"])
        return cross_entropy(yf - ycf, labels)[0]

    def bwd(a, d):
        yf, cf_ = likelihood_forward(a["x"], a["A"], a["W"])
        ycf, cc_ = likelihood_forward(a["x"], a["C"], a["W"])
        _, dl = cross_entropy(yf - ycf, labels)
        dx1, dA, dW1 = likelihood_backward(d * dl, cf_, a["W"])
        dx2, dC, dW2 = likelihood_backward(-d * dl, cc_, a["W"])
        return {"x": dx1 + dx2, "A": dA, "C": dC, "W": dW1 + dW2}

    args = {
        "x": rng.standard_normal((N, C, 4, 3)),
        "A": rng.uniform(0.05, 0.95, (N, M, 4, 3)),
        "C": rng.uniform(0.05, 0.95, (N, M, 4, 3)),
        "W": rng.standard_normal((K, C)),
    }
    return DiffOp("counterfactual_ce", fwd, bwd), args


def _triplet_case(rng):
    from .model import triplet_backward, triplet_forward

    labels = np.repeat([0, 1], 4)

    def fwd(a):
        return triplet_forward(a["emb"], labels, 0.2)[0]

    def bwd(a, d):
        _, cache = triplet_forward(a["emb"], labels, 0.2)
        return {"emb": triplet_backward(cache, d)}

    return DiffOp("triplet_loss", fwd, bwd), {"emb": 0.3 * rng.standard_normal((8, 2, 3))}


def _embed_case(rng):
    from .model import embed_backward, embed_forward

    def fwd(a):
        return embed_forward(a["F"], a["head"])[0]

    def bwd(a, d):
        _, cache = embed_forward(a["F"], a["head"])
        dF, dh = embed_backward(d, cache, a["head"])
        return {"F": dF, "head": dh}

    return DiffOp("embed", fwd, bwd), {"F": rng.standard_normal((2, 3, 4, 3)), "head": rng.standard_normal((2, 5, 3))}


MICRO_CONFIG = dict(
    channels=(2, 4), pool=(True, False), strips=2, embed_dim=3, num_classes=2, M=2, L=3, r=2, candidates=3
)


def micro_batch(rng, T=2, H=8, W=6):
    """Two identities x two sequences of continuous-valued frames."""
    seqs = rng.uniform(0.0, 1.0, size=(4, T, 1, H, W))
    return seqs, np.array([0, 0, 1, 1])


def _total_case(factual="dcdc", counterfactual="dcdc"):
    def build(rng):
        from .model import ModelConfig, init_params, model_loss

        cfg = ModelConfig(**MICRO_CONFIG, factual=factual, counterfactual=counterfactual)
        params = init_params(cfg, int(rng.integers(1 << 31)))
        seqs, labels = micro_batch(rng)
        cf_maps = None
        if counterfactual in ("normal", "uniform"):
            from .cil import sample_predefined

            cf_maps = sample_predefined((4, cfg.M, 4, 3), counterfactual, rng)

        def fwd(a):
            return model_loss(a, cfg, seqs, labels, cf_maps=cf_maps, need_grads=False)[0].total

        def bwd(a, d):
            _, g, _ = model_loss(a, cfg, seqs, labels, cf_maps=cf_maps)
            return {k: d * v for k, v in g.items()}

        return DiffOp(f"total_loss[{factual}/{counterfactual}]", fwd, bwd), params

    return build


REGISTRY = {
    "conv2d": _conv_case,
    "global_avg_pool": _gap_case,
    "affinity": _affinity_case,
    "assemble_kernel": _assemble_case,
    "generator[static]": _generator_case("static"),
    "generator[vanilla]": _generator_case("vanilla"),
    "generator[dcdc]": _generator_case("dcdc"),
    "nuclear_norm": _nuclear_case,
    "diversity_loss": _diversity_case,
    "counterfactual_ce": _cf_ce_case,
    "triplet_loss": _triplet_case,
    "embed": _embed_case,
    "total_loss": _total_case(),
    "total_loss[vanilla/normal]": _total_case("vanilla", "normal"),
}


def registered_case(name: str, seed: int):
    return REGISTRY[name](make_rng(seed, 303))


def run_registry(eps: float = 1e-5, rel_tol: float = 1e-4, seeds=(0, 1, 2), names=None):
    """One report per (op, seed); ops are rebuilt from fresh random instances per seed."""
    reports = []
    for name in names or REGISTRY:
        for seed in seeds:
            op, args = registered_case(name, seed)
            rep = finite_diff_check(op, args, eps=eps, rel_tol=rel_tol, seed=seed)
            rep.name = f"{op.name}@seed{seed}"
            reports.append(rep)
    return reports
