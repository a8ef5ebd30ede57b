"""``gaitgci`` command line: synth, train, eval, gradcheck, export-attention.

Exit codes: 0 success, 1 verification failure, 2 usage or config error,
3 I/O or data error. ``GCI_THREADS`` caps BLAS threads (default 1).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import checkpoint, gradcheck
from .config import RunConfig
from .data_synth import TRAIN, generate, load_sequence_dir, load_silhouette_dir, write_dataset
from .errors import CheckpointError, ConfigError, DatasetError, RegionOverlapError
from .train_eval import evaluate, export_attention, train, train_rank1

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("gaitgci")


def _load_config(path, seed=None):
    overrides = {}
    if seed is not None:
        overrides[("data", "seed")] = seed
        overrides[("train", "seed")] = seed
    if path is None:
        return RunConfig.preset("default", overrides)
    return RunConfig.from_file(path, overrides)


def cmd_synth(args):
    cfg = _load_config(args.spec, args.seed)
    spec = cfg.dataset_spec()
    records = generate(spec)
    rows = write_dataset(records, args.out)
    Path(args.out, "spec.ini").write_text(cfg.text or cfg.resolved_text())
    print(f"wrote {len(rows)} sequences to {args.out}")
    return EXIT_OK


def _training_records(data_dir, min_frames):
    root = Path(data_dir)
    if (root / "train").is_dir():
        root = root / "train"
    return load_silhouette_dir(root, min_frames=min_frames, split=TRAIN)


def cmd_train(args):
    cfg = _load_config(args.config, args.seed)
    tcfg = cfg.train_config(args.ablation)
    records = _training_records(args.data, cfg["data"]["min_frames"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.text or cfg.resolved_text())
    (out / "config.resolved.ini").write_text(cfg.resolved_text())

    def progress(it, bundle):
        if it % args.log_every == 0 or it == tcfg.iterations:
            print(f"iteration={it} l_cf={bundle.l_cf:.6f} l_tri={bundle.l_tri:.6f} "
                  f"l_div={bundle.l_div:.6f} total={bundle.total:.6f}", flush=True)

    result = train(tcfg, records, out_dir=out, progress=progress)
    r1 = train_rank1(result, records)
    print(f"final iteration={tcfg.iterations} arm={tcfg.arm_name()} checkpoint={result.checkpoint_path} rank-1={r1:.4f}")
    return EXIT_OK


def cmd_eval(args):
    params, mcfg = checkpoint.load(args.checkpoint)
    gallery = load_silhouette_dir(args.gallery, min_frames=args.min_frames)
    probe = load_silhouette_dir(args.probe, min_frames=args.min_frames)
    report = evaluate((params, mcfg), gallery, probe)
    print(report.line())
    csv_path = Path(args.csv) if args.csv else Path(args.checkpoint).with_name("eval.csv")
    ov = "" if report.overlap is None else repr(report.overlap)
    csv_path.write_text(
        "rank1,rank5,overlap,probes,gallery,excluded\n"
        f"{report.rank1!r},{report.rank5!r},{ov},{report.n_probe},{report.n_gallery},{report.excluded}\n"
    )
    return EXIT_OK


def cmd_gradcheck(args):
    seeds = tuple(int(s) for s in args.seeds.split(","))
    names = args.op or None
    if names:
        unknown = [n for n in names if n not in gradcheck.REGISTRY]
        if unknown:
            raise ConfigError(f"unknown op(s) {unknown}; registered: {sorted(gradcheck.REGISTRY)}")
    print(f"# gradcheck eps={args.eps:g} rel_tol={args.rel_tol:g} seeds={args.seeds}")
    reports = gradcheck.run_registry(eps=args.eps, rel_tol=args.rel_tol, seeds=seeds, names=names)
    for rep in reports:
        print(rep.line(), flush=True)
    failed = sum(not r.passed for r in reports)
    print(f"# {len(reports) - failed}/{len(reports)} passed")
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_export_attention(args):
    params, mcfg = checkpoint.load(args.checkpoint)
    seq = load_sequence_dir(args.sample)
    paths = export_attention((params, mcfg), seq, args.out, counterfactual=args.counterfactual)
    print(f"wrote {len(paths)} images to {args.out}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="gaitgci", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic confounded dataset")
    s.add_argument("--spec", help="config file whose [data] section describes the dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model and write metrics.csv and model.gci")
    t.add_argument("--config")
    t.add_argument("--data", required=True, help="dataset directory (uses its train/ subtree if present)")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--ablation", action="append", help="switch off one component (no-cil, no-gfa, ...) or name an arm")
    t.add_argument("--log-every", type=int, default=100)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="rank-1/rank-5 retrieval and confounder overlap")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--gallery", required=True)
    e.add_argument("--probe", required=True)
    e.add_argument("--csv", help="report CSV path (default: eval.csv beside the checkpoint)")
    e.add_argument("--min-frames", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of every registered op")
    g.add_argument("--eps", type=float, default=1e-5)
    g.add_argument("--rel-tol", type=float, default=1e-4)
    g.add_argument("--seeds", default="0,1,2")
    g.add_argument("--op", action="append", help="restrict to this op (repeatable)")
    g.set_defaults(func=cmd_gradcheck)

    x = sub.add_parser("export-attention", help="write attention maps of one sequence as PGM")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--sample", required=True, help="directory of PGM frames")
    x.add_argument("--out", required=True)
    x.add_argument("--counterfactual", action="store_true")
    x.set_defaults(func=cmd_export_attention)
    return p


def _threads():
    raw = os.environ.get("GCI_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"GCI_THREADS must be a positive integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError(f"GCI_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with threadpool_limits(limits=_threads()):
            return args.func(args)
    except (ConfigError, RegionOverlapError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
