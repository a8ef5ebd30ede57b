"""Adam, the training loop, retrieval evaluation, attention export, and the
ablation arms.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import checkpoint
from .cil import AttentionMaps, COUNTERFACTUAL, FACTUAL
from .data_synth import TRAIN, confounder_overlap, gallery_probe, write_pgm
from .errors import BatchCompositionError, ConfigError, NonFiniteError
from .model import (
    ModelConfig,
    counterfactual_maps,
    factual_maps,
    init_params,
    model_loss,
    sequence_embedding,
    with_switches,
)
from .tensor_core import make_rng

log = logging.getLogger(__name__)

CSV_COLUMNS = ("iteration", "l_cf", "l_tri", "l_div", "total", "wall_ms")
SWITCHES = ("cil_on", "gfa_on", "gca_on", "md_on", "dc_on")

# Two ablation families. Attention arms keep the decomposed generators
# and the diversity term; kernel arms keep every counterfactual component.
ARMS = {
    "baseline": dict(cil_on=False, gfa_on=False, gca_on=False, md_on=True, dc_on=True),
    "cil": dict(cil_on=True, gfa_on=False, gca_on=False, md_on=True, dc_on=True),
    "cil+gfa": dict(cil_on=True, gfa_on=True, gca_on=False, md_on=True, dc_on=True),
    "cil+gca": dict(cil_on=True, gfa_on=False, gca_on=True, md_on=True, dc_on=True),
    "full": dict(cil_on=True, gfa_on=True, gca_on=True, md_on=True, dc_on=True),
    "dyconv": dict(cil_on=True, gfa_on=True, gca_on=True, md_on=False, dc_on=False),
    "dyconv+md": dict(cil_on=True, gfa_on=True, gca_on=True, md_on=True, dc_on=False),
    "dyconv+md+dc": dict(cil_on=True, gfa_on=True, gca_on=True, md_on=True, dc_on=True),
}
ATTENTION_ARMS = ("baseline", "cil", "cil+gfa", "cil+gca", "full")
KERNEL_ARMS = ("dyconv", "dyconv+md", "dyconv+md+dc")
# --ablation shorthands for single switches
ABLATIONS = {"no-cil": "cil_on", "no-gfa": "gfa_on", "no-gca": "gca_on", "no-md": "md_on", "no-dc": "dc_on"}


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params, lr=1e-4, **kw):
        return cls(
            lr=lr,
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            **kw,
        )


def adam_step(state: AdamState, params: dict, grads: dict):
    """Bias-corrected Adam update, applied in place; returns ``(state, params)``.

    Parameters without a gradient entry are left untouched.
    """
    for name in sorted(grads):
        if not np.all(np.isfinite(grads[name])):
            raise NonFiniteError(f"adam_step: non-finite gradient for parameter {name!r}")
        if name not in params:
            raise KeyError(f"adam_step: gradient for unknown parameter {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name in sorted(grads):
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        params[name] = params[name] - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state, params


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class TrainConfig:
    preset: str = "custom"
    P: int = 8
    Kp: int = 8
    iterations: int = 2000
    lr: float = 1e-4
    lam: float = 0.1
    margin: float = 0.2
    frames: int = 30  # frames sampled per sequence each step; 0 uses all
    seed: int = 0
    cil_on: bool = True
    gfa_on: bool = True
    gca_on: bool = True
    md_on: bool = True
    dc_on: bool = True
    cf_dist: str = "normal"
    checkpoint_every: int = 0
    wall_clock: bool = False  # record real step times (breaks byte-identical logs)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.P < 2 or self.Kp < 2:
            raise ConfigError(f"TrainConfig: batch needs P >= 2 identities and Kp >= 2 samples, got {self.P}x{self.Kp}")
        if self.iterations < 0 or self.frames < 0:
            raise ConfigError("TrainConfig: iterations and frames must be non-negative")
        if self.cf_dist not in ("normal", "uniform"):
            raise ConfigError(f"TrainConfig: unknown predefined counterfactual {self.cf_dist!r}")

    @property
    def M(self):
        return self.model.M

    @property
    def L(self):
        return self.model.L

    @property
    def r(self):
        return self.model.r

    @property
    def switches(self) -> dict:
        return {k: getattr(self, k) for k in SWITCHES}

    def model_config(self) -> ModelConfig:
        """Architecture with the generator kinds implied by the switches."""
        return with_switches(
            self.model, cil_on=self.cil_on, gfa_on=self.gfa_on, gca_on=self.gca_on, md_on=self.md_on, cf_dist=self.cf_dist
        )

    def with_arm(self, arm: str) -> "TrainConfig":
        if arm not in ARMS:
            raise ConfigError(f"unknown arm {arm!r}; choose from {sorted(ARMS)}")
        return replace(self, **ARMS[arm])

    def arm_name(self):
        for name, sw in ARMS.items():
            if sw == self.switches:
                return name
        return "custom"


# ---------------------------------------------------------------- training


def _group_by_label(records):
    groups = {}
    for i, r in enumerate(records):
        groups.setdefault(r.label, []).append(i)
    return groups


def _label_index(records):
    return {lab: i for i, lab in enumerate(sorted({r.label for r in records}, key=str))}


def sample_batch(records, cfg: TrainConfig, rng, label_index=None):
    """Draw P identities x Kp sequences and a frame subset of each.

    Returns ``(seqs [P*Kp,F,1,H,W], labels)`` with labels mapped to class indices.
    """
    label_index = label_index or _label_index(records)
    groups = _group_by_label(records)
    ids = sorted(groups, key=str)
    if len(ids) < cfg.P:
        raise BatchCompositionError(f"batch needs {cfg.P} identities, dataset has {len(ids)}")
    chosen = [ids[i] for i in sorted(rng.choice(len(ids), size=cfg.P, replace=False))]
    seqs, labels = [], []
    for ident in chosen:
        members = groups[ident]
        pick = rng.choice(len(members), size=cfg.Kp, replace=len(members) < cfg.Kp)
        for j in pick:
            seq = records[members[j]].sequence
            T = seq.shape[0]
            if cfg.frames and cfg.frames != T:
                idx = np.sort(rng.choice(T, size=cfg.frames, replace=T < cfg.frames))
                seq = seq[idx]
            seqs.append(seq)
            labels.append(label_index[ident])
    try:
        batch = np.stack(seqs)
    except ValueError as exc:
        raise BatchCompositionError(f"sequences in a batch differ in shape; set a fixed frame count ({exc})") from exc
    return batch, np.asarray(labels, dtype=np.int64)


@dataclass
class TrainResult:
    params: dict
    model: ModelConfig
    rows: list
    log_path: Path | None = None
    checkpoint_path: Path | None = None


def _fmt(v):
    return repr(float(v))


def csv_header(cfg: TrainConfig) -> str:
    sw = " ".join(f"{k}={int(v)}" for k, v in cfg.switches.items())
    return f"# arm={cfg.arm_name()} {sw} seed={cfg.seed}\n" + ",".join(CSV_COLUMNS) + "\n"


def train(cfg: TrainConfig, dataset, out_dir=None, progress=None) -> TrainResult:
    """Run the optimisation loop on the training records of ``dataset``.

    Writes ``metrics.csv`` and ``model.gci`` (plus periodic checkpoints) under
    ``out_dir`` when given. ``progress(iteration, LossBundle)`` is called per step.
    """
    records = [r for r in dataset if r.split == TRAIN] or list(dataset)
    mcfg = cfg.model_config()
    if mcfg.num_classes < len({r.label for r in records}):
        raise ConfigError(f"model num_classes={mcfg.num_classes} < {len({r.label for r in records})} training identities")
    params = init_params(mcfg, cfg.seed)
    state = AdamState.for_params(params, lr=cfg.lr)
    batch_rng = make_rng(cfg.seed, 11)
    cf_rng = make_rng(cfg.seed, 12)
    label_index = _label_index(records)

    out = Path(out_dir) if out_dir is not None else None
    fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "metrics.csv", "w")
        fh.write(csv_header(cfg))
    rows = []
    try:
        for it in range(1, cfg.iterations + 1):
            t0 = time.perf_counter()
            seqs, labels = sample_batch(records, cfg, batch_rng, label_index)
            try:
                bundle, grads, _ = model_loss(
                    params, mcfg, seqs, labels, lam=cfg.lam, margin=cfg.margin,
                    cil_on=cfg.cil_on, dc_on=cfg.dc_on, rng=cf_rng,
                )
            except NonFiniteError as exc:
                raise NonFiniteError(f"iteration {it}: {exc}") from exc
            state, params = adam_step(state, params, grads)
            wall = (time.perf_counter() - t0) * 1e3 if cfg.wall_clock else 0.0
            row = (it, bundle.l_cf, bundle.l_tri, bundle.l_div, bundle.total, wall)
            rows.append(row)
            if fh is not None:
                fh.write(f"{it}," + ",".join(_fmt(v) for v in row[1:]) + "\n")
            if progress is not None:
                progress(it, bundle)
            if out is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
                checkpoint.save(out / f"ckpt_{it:06d}.gci", params, mcfg)
    finally:
        if fh is not None:
            fh.close()
    result = TrainResult(params, mcfg, rows)
    if out is not None:
        result.log_path = out / "metrics.csv"
        result.checkpoint_path = out / "model.gci"
        checkpoint.save(result.checkpoint_path, params, mcfg)
    return result


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalReport:
    rank1: float
    rank5: float
    overlap: float | None
    n_probe: int
    n_gallery: int
    excluded: int = 0
    per_seed: list = field(default_factory=list)

    def __post_init__(self):
        for name in ("rank1", "rank5"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"EvalReport: {name}={v} outside [0, 1]")

    def line(self):
        ov = "nan" if self.overlap is None else f"{self.overlap:.4f}"
        return (
            f"rank-1={self.rank1:.4f} rank-5={self.rank5:.4f} overlap={ov} "
            f"probes={self.n_probe} gallery={self.n_gallery} excluded={self.excluded}"
        )


def strip_distance(probe_emb, gallery_emb):
    """Mean over strips of Euclidean distance; [Np,B,D] x [Ng,B,D] -> [Np,Ng]."""
    diff = probe_emb[:, None] - gallery_emb[None]
    return np.sqrt(np.sum(diff * diff, axis=-1)).mean(axis=-1)


def rank_k(dist, probe_labels, gallery_labels, ks=(1, 5)):
    """Fraction of probes whose k nearest gallery items include their identity.

    Ties are broken by gallery order (stable sort).
    """
    order = np.argsort(dist, axis=1, kind="stable")
    g = np.asarray(gallery_labels, dtype=object)[order]
    hit = g == np.asarray(probe_labels, dtype=object)[:, None]
    return [float(np.mean(hit[:, :k].any(axis=1))) for k in ks]


def embed_records(params, cfg: ModelConfig, records):
    return np.stack([sequence_embedding(params, cfg, r.sequence) for r in records])


def retrieval(probe_emb, probe_labels, gallery_emb, gallery_labels):
    """(rank-1, rank-5, excluded) with probes of unseen identities excluded."""
    known = set(gallery_labels)
    keep = [i for i, lab in enumerate(probe_labels) if lab in known]
    excluded = len(probe_labels) - len(keep)
    if not keep:
        raise ValueError("evaluate: no probe identity appears in the gallery")
    dist = strip_distance(probe_emb[keep], gallery_emb)
    r1, r5 = rank_k(dist, [probe_labels[i] for i in keep], gallery_labels)
    return r1, r5, excluded


def mean_overlap(params, cfg: ModelConfig, records):
    vals = [
        confounder_overlap(factual_maps(params, cfg, r.sequence)[0], r.confounder_mask)
        for r in records
        if np.any(r.confounder_mask)
    ]
    return float(np.mean(vals)) if vals else None


def _resolve(ckpt):
    if isinstance(ckpt, TrainResult):
        return ckpt.params, ckpt.model
    if isinstance(ckpt, tuple):
        return ckpt
    return checkpoint.load(ckpt)


def evaluate(ckpt, gallery, probe) -> EvalReport:
    """Retrieval accuracy and confounder overlap of probes against a gallery.

    ``ckpt`` is a checkpoint path, a ``(params, ModelConfig)`` pair or a TrainResult.
    """
    params, cfg = _resolve(ckpt)
    g_emb = embed_records(params, cfg, gallery)
    p_emb = embed_records(params, cfg, probe)
    r1, r5, excluded = retrieval(p_emb, [r.label for r in probe], g_emb, [r.label for r in gallery])
    if excluded:
        log.warning("evaluate: %d probes have no gallery identity and were excluded", excluded)
    return EvalReport(r1, r5, mean_overlap(params, cfg, probe), len(probe) - excluded, len(gallery), excluded)


def train_rank1(result: TrainResult, dataset) -> float:
    """Rank-1 on the training split with the first sequence per identity as gallery."""
    gallery, probe = gallery_probe([r for r in dataset if r.split == TRAIN])
    return evaluate(result, gallery, probe).rank1


def aggregate(reports) -> dict:
    """Mean and stddev of each metric across seeds."""
    out = {}
    for name in ("rank1", "rank5", "overlap"):
        vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        if vals:
            out[name] = (float(np.mean(vals)), float(np.std(vals)))
    return out


def seed_report(reports) -> EvalReport:
    agg = aggregate(reports)
    ov = agg.get("overlap", (None,))[0]
    first = reports[0]
    return EvalReport(agg["rank1"][0], agg["rank5"][0], ov, first.n_probe, first.n_gallery, first.excluded, list(reports))


# ---------------------------------------------------------------- attention export


def normalize_map(a):
    """Min-max scale to [0,1]; a constant map becomes mid-gray (128/255)."""
    lo, hi = float(a.min()), float(a.max())
    if hi == lo:
        return np.full(a.shape, 128.0 / 255.0)
    return (a - lo) / (hi - lo)


def to_uint8(a):
    return np.clip(np.round(a * 255.0), 0, 255).astype(np.uint8)


def export_attention(ckpt, sample, out_dir, counterfactual=False, rng=None):
    """Write the input frames and each attention map as 8-bit PGM under ``out_dir``.

    Maps are computed from the whole sequence, so every frame shares them; one
    file per map per frame keeps frames and maps paired on disk. Returns the
    written paths.
    """
    params, cfg = _resolve(ckpt)
    seq = getattr(sample, "sequence", sample)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    kinds = [(FACTUAL, factual_maps(params, cfg, seq)[0])]
    if counterfactual:
        C = counterfactual_maps(params, cfg, seq, rng=rng)
        if C is not None:
            kinds.append((COUNTERFACTUAL, C))
    written = []
    for t, frame in enumerate(seq[:, 0]):
        p = out / f"frame{t:03d}.pgm"
        write_pgm(p, frame)
        written.append(p)
        for kind, maps in kinds:
            AttentionMaps(kind, maps)
            for m, a in enumerate(maps):
                p = out / f"frame{t:03d}_{kind}{m}.pgm"
                write_pgm(p, to_uint8(normalize_map(a)))
                written.append(p)
    return written


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
