"""Command-line surface: pretrain, bench-attn, gradcheck, knn-eval,
make-synthetic."""

from __future__ import annotations

import argparse
import os
import sys



def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maskcluster",
        description="Masked-reconstruction + clustering self-supervised "
                    "pretraining at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="run self-supervised pretraining")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override trainer seed")
    p.add_argument("--steps", type=int, help="override step count")

    p = sub.add_parser("bench-attn", help="attention throughput benchmark")
    p.add_argument("--tokens", type=int, default=197)
    p.add_argument("--dim", type=int, default=384)
    p.add_argument("--heads", type=int, default=6)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--ratios", default="0,0.25,0.5,0.75")
    p.add_argument("--repeats", type=int, default=9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", help="also write the kernel report as CSV here")
    p.add_argument("--full-forward", action="store_true",
                   help="additionally benchmark the whole student forward")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=20)

    p = sub.add_parser("knn-eval", help="frozen-feature kNN probe")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default="synthetic:shapes")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--n", type=int, default=512,
                   help="sample count for synthetic data")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("make-synthetic", help="write the toy shapes dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=512)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _cmd_pretrain(args) -> int:
    from dataclasses import replace

    from .config import ConfigError, load_config
    from .data import load_dataset
    from .trainer import init_train_state, pretrain

    try:
        bundle = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    tcfg = bundle.trainer
    if args.seed is not None:
        tcfg = replace(tcfg, seed=args.seed)
    if args.steps is not None:
        tcfg = replace(tcfg, steps=args.steps)
    images, _ = load_dataset(bundle.data)
    state = init_train_state(bundle.encoder, bundle.recon, bundle.cluster, tcfg)
    rows = pretrain(state, images, args.out)
    last = rows[-1] if rows else None
    print(f"pretraining done: {state.step} steps, "
          f"checkpoint at {os.path.join(args.out, 'checkpoint')}")
    if last is not None:
        print(f"final total loss {last['total']:.4f}")
    return 0


def _cmd_bench(args) -> int:
    from .bench import bench_attention, bench_full_forward

    ratios = tuple(float(r) for r in args.ratios.split(","))
    report = bench_attention(args.tokens, args.dim, args.heads, args.batch,
                             ratios, args.repeats, seed=args.seed)
    print(report.as_table())
    print()
    print(report.as_csv())
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write(report.as_csv())
    if args.full_forward:
        fwd = bench_full_forward(args.tokens, args.dim, args.heads, args.batch,
                                 ratios=ratios, seed=args.seed)
        print(fwd.as_table())
    return 0


def _cmd_gradcheck(args) -> int:
    from .gradcheck import run_all

    results = run_all(seed=args.seed, trials=args.trials)
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.name:<28} max rel err {r.max_rel_err:.3e} "
              f"(tol {r.tol:.0e})")
        failed += not r.passed
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


def _cmd_knn(args) -> int:
    from .data import DatasetSpec, knn_probe, load_dataset
    from .trainer import checkpoint_load

    state = checkpoint_load(args.checkpoint)
    spec = DatasetSpec(source=args.data, image_size=state.ecfg.image_size,
                       n=args.n, seed=args.seed)
    images, labels = load_dataset(spec)
    n_train = int(0.8 * len(labels))
    acc = knn_probe(state.params, state.ecfg,
                    images[:n_train], labels[:n_train],
                    images[n_train:], labels[n_train:], k=args.k)
    print(f"knn accuracy (k={args.k}): {acc:.4f}")
    return 0


def _cmd_make_synthetic(args) -> int:
    from .data import write_shapes_dataset

    write_shapes_dataset(args.out, args.n, args.size, args.seed)
    print(f"wrote {args.n} images to {args.out}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    handlers = {
        "pretrain": _cmd_pretrain,
        "bench-attn": _cmd_bench,
        "gradcheck": _cmd_gradcheck,
        "knn-eval": _cmd_knn,
        "make-synthetic": _cmd_make_synthetic,
    }
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
