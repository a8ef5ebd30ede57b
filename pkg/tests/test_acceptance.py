"""End-to-end acceptance checks, one PASS/FAIL line each.

Every tolerance, seed count and time budget is pinned here. The slow
training checks (overfit, confounder, ablation lattice) take roughly half an
hour together on one core.
"""
import math
import time
from dataclasses import replace

import numpy as np

from gaitgci import checkpoint
from gaitgci.cil import AttentionMaps, counterfactual_loss, intervention_likelihoods
from gaitgci.config import RunConfig
from gaitgci.data_synth import gallery_probe, generate, split
from gaitgci.dcdc import DcdcKernelSet, VanillaDynConv, assemble_kernel, reformulate, vanilla_kernel, vanilla_scores
from gaitgci.gradcheck import MICRO_CONFIG, micro_batch, run_registry
from gaitgci.model import ModelConfig, basis_norms, init_params, model_loss, sequence_embedding
from gaitgci.tensor_core import make_rng, softmax
from gaitgci.train_eval import ATTENTION_ARMS, KERNEL_ARMS, evaluate, train, train_rank1

from oracles import assemble_double_sum

ALGEBRA_INSTANCES = 100
VANILLA_TOL = 1e-10
ASSEMBLE_TOL = 1e-12
ALGEBRA_BUDGET_S = 10.0

GRAD_EPS, GRAD_REL_TOL, GRAD_SEEDS = 1e-5, 1e-4, (0, 1, 2)
GRAD_BUDGET_S = 120.0
GRAD_REQUIRED = ("nuclear_norm", "affinity", "assemble_kernel", "counterfactual_ce", "triplet_loss", "total_loss")

SOFTMAX_TOL = 1e-12
LAM = 0.1

OVERFIT_BUDGET_S = 600.0
OVERFIT_WINDOW = 100

CONFOUNDER_SEEDS = (0, 1, 2, 3, 4)
CONFOUNDER_WINS = 4
CONFOUNDER_BUDGET_S = 2400.0

LATTICE_ITERATIONS = 30
NORM_ITERATIONS = 200
NORM_SEEDS = (0, 1, 2, 3, 4)
NORM_WINS = 4


def test_algebraic_oracle_suite(verdict):
    t0 = time.perf_counter()
    rng = make_rng(2024, 1)
    worst_vanilla = 0.0
    for i in range(ALGEBRA_INSTANCES):
        S = (2, 4, 8)[i % 3]
        dc = VanillaDynConv.init(int(rng.integers(1, 6)), int(rng.integers(1, 5)), 3, S, rng)
        X = rng.standard_normal((dc.att.shape[1], 5, 4))
        pi = vanilla_scores(dc, X)
        W0, deltas = reformulate(dc.candidates)
        worst_vanilla = max(worst_vanilla, np.abs(vanilla_kernel(dc, X) - (W0 + np.tensordot(pi, deltas, axes=1))).max())
    worst_assemble = 0.0
    for _ in range(ALGEBRA_INSTANCES):
        cin, L = int(rng.choice([4, 8])), int(rng.integers(1, 6))
        ks = DcdcKernelSet.init(cin, int(rng.integers(1, 5)), int(rng.choice([1, 3])), L, 4, rng)
        phi = rng.standard_normal((L, L))
        ref = assemble_double_sum(ks.W0, ks.P, phi, ks.Q)
        worst_assemble = max(worst_assemble, np.abs(assemble_kernel(ks, phi) - ref).max())
    elapsed = time.perf_counter() - t0
    ok = worst_vanilla <= VANILLA_TOL and worst_assemble <= ASSEMBLE_TOL and elapsed < ALGEBRA_BUDGET_S
    verdict(1, "algebraic oracles", ok,
            f"vanilla max|diff|={worst_vanilla:.2e} (tol {VANILLA_TOL:g}), assemble max|diff|={worst_assemble:.2e} "
            f"(tol {ASSEMBLE_TOL:g}), {elapsed:.1f}s (budget {ALGEBRA_BUDGET_S:g}s)")
    assert ok


def test_gradient_suite(verdict):
    t0 = time.perf_counter()
    reports = run_registry(eps=GRAD_EPS, rel_tol=GRAD_REL_TOL, seeds=GRAD_SEEDS)
    elapsed = time.perf_counter() - t0
    failed = [r.name for r in reports if not r.passed]
    covered = {req for req in GRAD_REQUIRED if any(r.name.startswith(req) for r in reports)}
    worst = max(max(r.max_rel.values(), default=0.0) for r in reports)
    ok = not failed and covered == set(GRAD_REQUIRED) and elapsed < GRAD_BUDGET_S
    verdict(2, "gradient suite", ok,
            f"{len(reports) - len(failed)}/{len(reports)} checks pass at eps={GRAD_EPS:g} rel_tol={GRAD_REL_TOL:g} "
            f"seeds={len(GRAD_SEEDS)}, worst rel={worst:.2e}, {elapsed:.1f}s (budget {GRAD_BUDGET_S:g}s)"
            + (f", failed {failed}" if failed else ""))
    assert ok


def test_exact_identities(verdict):
    rng = make_rng(2024, 3)
    log_k = {}
    for K in (2, 4, 10):
        X = rng.standard_normal((6, 4, 3))
        A = AttentionMaps("factual", rng.random((2, 4, 3)))
        e = intervention_likelihoods(X, A, AttentionMaps("counterfactual", A.maps.copy()), rng.standard_normal((K, 6)))
        log_k[K] = counterfactual_loss(e, int(rng.integers(K))) == math.log(K) and not np.any(e.y_e)
    sums = softmax(rng.standard_normal((1000, 7)) * 10.0, axis=1).sum(axis=1)
    worst_sum = float(np.abs(sums - 1.0).max())
    cfg = ModelConfig(**MICRO_CONFIG)
    seqs, labels = micro_batch(make_rng(2024, 4))
    b, _, _ = model_loss(init_params(cfg, 3), cfg, seqs, labels, lam=LAM, need_grads=False)
    total_exact = b.total == b.l_cf + b.l_tri + LAM * b.l_div and b.lam == LAM
    ok = all(log_k.values()) and worst_sum <= SOFTMAX_TOL and total_exact
    verdict(3, "exact identities", ok,
            f"CE==ln K for K={[k for k, v in log_k.items() if v]}, max|sum(pi)-1|={worst_sum:.1e} "
            f"(tol {SOFTMAX_TOL:g}), total exact at lambda={LAM}: {total_exact}")
    assert ok


def test_overfit_experiment(verdict):
    rc = RunConfig.preset("overfit")
    tcfg = rc.train_config()
    data = generate(rc.dataset_spec())
    t0 = time.perf_counter()
    result = train(tcfg, data)
    r1 = train_rank1(result, data)
    elapsed = time.perf_counter() - t0
    total = np.array([row[4] for row in result.rows])
    ma = np.convolve(total, np.ones(OVERFIT_WINDOW) / OVERFIT_WINDOW, mode="valid")
    tail = ma[int(0.2 * len(total)):]
    worst_rise = float(np.diff(tail).max())
    n_train = len(split(data, "train"))
    ok = (n_train == 32 and tcfg.iterations == 2000 and tcfg.lr == 1e-4 and r1 == 1.0
          and worst_rise <= 0.0 and elapsed < OVERFIT_BUDGET_S)
    verdict(4, "overfit", ok,
            f"{n_train} sequences, {tcfg.iterations} steps at lr={tcfg.lr:g}: training rank-1={r1:.4f}, "
            f"largest rise of the {OVERFIT_WINDOW}-step moving average over the last 80%={worst_rise:.2e}, "
            f"{elapsed:.0f}s (budget {OVERFIT_BUDGET_S:g}s)")
    assert ok


def test_confounder_mitigation(verdict):
    t0 = time.perf_counter()
    rows = []
    for seed in CONFOUNDER_SEEDS:
        rc = RunConfig.preset("confounder", {("data", "seed"): seed, ("train", "seed"): seed})
        spec = rc.dataset_spec()
        data = generate(spec)
        gallery, probe = gallery_probe(split(data, "test"))
        reps = {arm: evaluate(train(rc.train_config([arm]), data), gallery, probe) for arm in ("baseline", "full")}
        rows.append((seed, reps["baseline"], reps["full"]))
        print(f"seed {seed}: baseline {reps['baseline'].line()} | full {reps['full'].line()}")
    elapsed = time.perf_counter() - t0
    rank_wins = sum(f.rank1 > b.rank1 for _, b, f in rows)
    overlap_wins = sum(f.overlap < b.overlap for _, b, f in rows)
    ok = rank_wins >= CONFOUNDER_WINS and overlap_wins >= CONFOUNDER_WINS and elapsed < CONFOUNDER_BUDGET_S
    per_seed = "; ".join(
        f"s{s} r1 {b.rank1:.3f}->{f.rank1:.3f} ov {b.overlap:.4f}->{f.overlap:.4f}" for s, b, f in rows
    )
    verdict(5, "confounder mitigation", ok,
            f"K={spec.num_classes} rho_train={spec.train_corr} rho_test=1/K: full beats baseline on rank-1 in "
            f"{rank_wins}/{len(rows)} seeds and on overlap in {overlap_wins}/{len(rows)} (need {CONFOUNDER_WINS} each), "
            f"{elapsed:.0f}s (budget {CONFOUNDER_BUDGET_S:g}s) [{per_seed}]")
    assert ok


def test_ablation_lattice(verdict):
    rc = RunConfig.preset("confounder")
    data = generate(rc.dataset_spec())
    completed = []
    for arm in ATTENTION_ARMS + KERNEL_ARMS:
        tcfg = replace(rc.train_config([arm]), iterations=LATTICE_ITERATIONS)
        res = train(tcfg, data)
        if len(res.rows) == LATTICE_ITERATIONS and all(math.isfinite(v) for v in res.rows[-1][1:]):
            completed.append(arm)
    wins, pairs = 0, []
    for seed in NORM_SEEDS:
        base = RunConfig.preset("confounder", {("data", "seed"): seed, ("train", "seed"): seed})
        seed_data = generate(base.dataset_spec())
        means = {}
        for arm in ("dyconv+md", "dyconv+md+dc"):
            res = train(replace(base.train_config([arm]), iterations=NORM_ITERATIONS), seed_data)
            means[arm] = float(np.mean(list(basis_norms(res.params, res.model).values())))
        pairs.append((means["dyconv+md"], means["dyconv+md+dc"]))
        wins += means["dyconv+md+dc"] > means["dyconv+md"]
    n_arms = len(ATTENTION_ARMS + KERNEL_ARMS)
    ok = len(completed) == n_arms and wins >= NORM_WINS
    verdict(6, "ablation lattice", ok,
            f"{len(completed)}/{n_arms} arms trained {LATTICE_ITERATIONS} steps; mean P/Q nuclear norm with DC exceeds "
            f"without in {wins}/{len(NORM_SEEDS)} seeds after {NORM_ITERATIONS} steps (need {NORM_WINS}) "
            f"[{'; '.join(f'{a:.4f}->{b:.4f}' for a, b in pairs)}]")
    assert ok


def test_determinism(verdict, tmp_path):
    rc = RunConfig.preset("confounder", {("train", "iterations"): 20, ("train", "checkpoint_every"): 10})
    data = generate(rc.dataset_spec())
    runs = [train(rc.train_config(), data, out_dir=tmp_path / name) for name in ("a", "b")]
    files = ("metrics.csv", "model.gci", "ckpt_000010.gci")
    same = {f: (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files}
    ok = all(same.values()) and len(runs[0].rows) == 20
    verdict(7, "determinism", ok, ", ".join(f"{f} identical={v}" for f, v in same.items()))
    assert ok


def test_inference_purity(verdict, tmp_path):
    rc = RunConfig.preset("confounder", {("train", "iterations"): 20})
    data = generate(rc.dataset_spec())
    res = train(rc.train_config(), data, out_dir=tmp_path)
    params, cfg = checkpoint.load(res.checkpoint_path)
    checkpoint.save(tmp_path / "stripped.gci", checkpoint.strip_counterfactual(params), cfg)
    stripped, _ = checkpoint.load(tmp_path / "stripped.gci")
    n_cf = sum(k.startswith("cf.") for k in params)
    test = split(data, "test")
    identical = all(
        np.array_equal(sequence_embedding(params, cfg, r.sequence), sequence_embedding(stripped, cfg, r.sequence))
        for r in test
    )
    full_rep = evaluate((params, cfg), *gallery_probe(test))
    strip_rep = evaluate((stripped, cfg), *gallery_probe(test))
    ok = n_cf > 0 and not any(k.startswith("cf.") for k in stripped) and identical and full_rep == strip_rep
    verdict(8, "inference purity", ok,
            f"removed {n_cf} counterfactual tensors; {len(test)} test embeddings bit-identical={identical}, "
            f"eval reports equal={full_rep == strip_rep}")
    assert ok
