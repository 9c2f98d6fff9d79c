"""Command-line front end.

Every subcommand prints its resolved configuration (including the seed) to
stderr before doing any work, so a run can be repeated from its log. Results
go to CSV files or, for ``solve-budget``, to stdout.
"""

from __future__ import annotations

import argparse
import dataclasses
import math
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .budget import (
    STRATEGIES,
    anytime_csv,
    anytime_curve,
    build_sequential_ensemble_baseline,
    solve_a_for_budget,
    sweep_csv,
    sweep_stream,
)
from .core import (
    EmbeddingTable,
    SyntheticConfig,
    check_table_stages,
    generate_synthetic,
    load_dataset,
    load_embedding_table,
    save_dataset,
    save_embedding_table,
    split_dataset,
)
from .encoder import EncoderConfig, embedding_table, load_params, save_params
from .retrieval import evaluate_tables, metrics_csv, stage_names
from .training import TrainConfig, train


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # one line instead of usage + message
        self.exit(2, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _echo(command: str, **settings) -> None:
    parts = []
    for key, value in settings.items():
        if dataclasses.is_dataclass(value):
            value = dataclasses.asdict(value)
        parts.append(f"{key}={value}")
    print(f"[dare {command}] " + " ".join(parts), file=sys.stderr)


def _write(path: str, text: str) -> None:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text, encoding="utf-8")


# argument groups shared by several commands ----------------------------------


def _add_encoder_args(p: argparse.ArgumentParser) -> None:
    d = EncoderConfig()
    p.add_argument("--widths", type=_ints, default=d.backbone_widths,
                   help="backbone widths, one per stage (default %(default)s)")
    p.add_argument("--head-hidden", type=int, default=d.head_hidden_width)
    p.add_argument("--embedding-dim", type=int, default=d.embedding_dim)


def _add_train_args(p: argparse.ArgumentParser) -> None:
    d = TrainConfig()
    p.add_argument("--iterations", type=int, default=d.total_iterations)
    p.add_argument("--decay-start", type=int, default=None,
                   help="iteration where the learning rate starts to decay (default: half)")
    p.add_argument("--lr", type=float, default=d.base_lr)
    p.add_argument("--P", type=int, default=d.P, help="identities per batch")
    p.add_argument("--K", type=int, default=d.K, help="samples per identity in a batch")
    p.add_argument("--seed", type=int, default=0)


def _encoder_config(args, input_dim: int) -> EncoderConfig:
    return EncoderConfig(input_dim=input_dim, backbone_widths=args.widths,
                         head_hidden_width=args.head_hidden, embedding_dim=args.embedding_dim)


def _train_config(args, deep_supervision: bool) -> TrainConfig:
    return TrainConfig(P=args.P, K=args.K, total_iterations=args.iterations,
                       decay_start=args.decay_start, base_lr=args.lr,
                       deep_supervision=deep_supervision, seed=args.seed)


def _add_tables_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--query", required=True, help="query embedding table (or dataset with --checkpoint)")
    p.add_argument("--gallery", required=True, help="gallery embedding table (or dataset with --checkpoint)")
    p.add_argument("--checkpoint", help="embed --query and --gallery datasets with this model first")


def _load_tables(args) -> tuple[EmbeddingTable, EmbeddingTable]:
    if args.checkpoint:
        params = load_params(args.checkpoint)
        query = embedding_table(params, load_dataset(args.query))
        gallery = embedding_table(params, load_dataset(args.gallery))
    else:
        query, gallery = load_embedding_table(args.query), load_embedding_table(args.gallery)
    check_table_stages([query, gallery])
    return query, gallery


# commands -------------------------------------------------------------------


def cmd_gen_data(args) -> None:
    config = SyntheticConfig(
        num_identities=args.num_identities, samples_per_identity=args.samples_per_identity,
        input_dim=args.input_dim, easy_fraction=args.easy_fraction,
        coarse_margin=args.coarse_margin, fine_margin=args.fine_margin,
        noise_sigma=args.noise_sigma, seed=args.seed,
    )
    _echo("gen-data", config=config, train_frac=args.train_frac,
          query_per_identity=args.query_per_identity, seed=args.seed)
    ds = generate_synthetic(config)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out / "all.txt")
    train_split, query, gallery = split_dataset(ds, args.train_frac, args.query_per_identity, args.seed)
    save_dataset(train_split, out / "train.txt")
    save_dataset(query, out / "query.txt")
    save_dataset(gallery, out / "gallery.txt")


def cmd_train(args) -> None:
    dataset = load_dataset(args.data)
    enc = _encoder_config(args, dataset.dim)
    tc = _train_config(args, deep_supervision=not args.no_deep_supervision)
    _echo("train", encoder=enc, training=tc, seed=tc.seed)
    result = train(dataset, enc, tc)
    save_params(result.params, args.out)
    if args.trace:
        _write(args.trace, result.trace_csv())


def cmd_embed(args) -> None:
    _echo("embed", checkpoint=args.checkpoint, data=args.data)
    params = load_params(args.checkpoint)
    save_embedding_table(embedding_table(params, load_dataset(args.data)), args.out)


def cmd_eval(args) -> None:
    _echo("eval", query=args.query, gallery=args.gallery, checkpoint=args.checkpoint,
          exclude_same_camera=args.exclude_same_camera)
    query, gallery = _load_tables(args)
    metrics = evaluate_tables(query, gallery, exclude_same_camera=args.exclude_same_camera)
    _write(args.out, metrics_csv(metrics))


def _budget_grid(args, costs: Sequence[float]) -> list[float]:
    if args.budgets:
        return args.budgets
    top = costs[-1] * 1.1
    return np.linspace(0.0, top, args.num_budgets).tolist()


def cmd_anytime(args) -> None:
    if args.baseline and not (args.checkpoint and args.train_data and args.baseline_out):
        raise ValueError("--baseline needs --checkpoint, --train-data and --baseline-out")
    query, gallery = _load_tables(args)
    budgets = _budget_grid(args, query.costs)
    extra = {}
    if args.baseline:
        raw_query, raw_gallery = load_dataset(args.query), load_dataset(args.gallery)
        extra = dict(
            members=[
                EncoderConfig(input_dim=raw_query.dim, backbone_widths=w,
                              head_hidden_width=args.head_hidden, embedding_dim=args.embedding_dim)
                for w in args.member_widths
            ],
            training=_train_config(args, deep_supervision=False),
        )
    _echo("anytime", query=args.query, gallery=args.gallery, checkpoint=args.checkpoint,
          budgets=budgets, baseline=args.baseline, seed=args.seed, **extra)
    curve = anytime_curve(query, gallery, budgets, args.exclude_same_camera)
    _write(args.out, anytime_csv(curve, stage_names(query.num_stages)))
    if args.baseline:
        ensemble = build_sequential_ensemble_baseline(
            extra["members"], load_dataset(args.train_data), extra["training"]
        )
        eq, eg = ensemble.embedding_table(raw_query), ensemble.embedding_table(raw_gallery)
        names = [f"member{i + 1}" for i in range(len(ensemble.members))]
        curve = anytime_curve(eq, eg, budgets, args.exclude_same_camera)
        _write(args.baseline_out, anytime_csv(curve, names))


def cmd_stream(args) -> None:
    query, gallery = _load_tables(args)
    if args.shuffle:
        # split files list queries grouped by identity; routing expects exchangeable arrivals
        query = query.subset(np.random.default_rng(args.seed).permutation(len(query)))
    strategies = STRATEGIES if args.strategy == "all" else (args.strategy,)
    grid = dict(a_values=args.a_values) if args.a_values else dict(budgets=args.budgets)
    if not args.a_values and not args.budgets:
        grid = dict(a_values=[0.0, 0.25, 0.5, 1.0, 2.0, 4.0, math.inf])
    _echo("stream", query=args.query, gallery=args.gallery, checkpoint=args.checkpoint,
          strategies=list(strategies), warmup=args.warmup, shuffle=args.shuffle, seed=args.seed,
          **grid)
    if len(strategies) > 1 and not args.out.count("{strategy}"):
        raise ValueError("--strategy all needs an --out path containing '{strategy}'")
    for strategy in strategies:
        rows = sweep_stream(query, gallery, strategy, seed=args.seed, warmup=args.warmup, **grid)
        _write(args.out.format(strategy=strategy), sweep_csv(rows))


def cmd_solve_budget(args) -> None:
    _echo("solve-budget", costs=args.costs, budget=args.budget)
    a = solve_a_for_budget(args.budget, args.costs)
    print(f"a={a:.12g}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dare", description="Resource-aware identity retrieval experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    d = SyntheticConfig()
    p = sub.add_parser("gen-data", help="generate a synthetic dataset and its splits")
    p.add_argument("--out-dir", required=True,
                   help="directory for all.txt, train.txt, query.txt and gallery.txt")
    p.add_argument("--num-identities", type=int, default=d.num_identities)
    p.add_argument("--samples-per-identity", type=int, default=d.samples_per_identity)
    p.add_argument("--input-dim", type=int, default=d.input_dim)
    p.add_argument("--easy-fraction", type=float, default=d.easy_fraction)
    p.add_argument("--coarse-margin", type=float, default=d.coarse_margin)
    p.add_argument("--fine-margin", type=float, default=d.fine_margin)
    p.add_argument("--noise-sigma", type=float, default=d.noise_sigma)
    p.add_argument("--train-frac", type=float, default=0.5)
    p.add_argument("--query-per-identity", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train an encoder; writes a checkpoint and a loss trace")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--trace", help="loss trace CSV path")
    p.add_argument("--no-deep-supervision", action="store_true",
                   help="train on the fused embedding only")
    _add_encoder_args(p)
    _add_train_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="write the per-stage and fused embeddings of a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("eval", help="per-stage and fused CMC@1 and mAP")
    _add_tables_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--exclude-same-camera", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("anytime", help="accuracy over a grid of per-query budgets")
    _add_tables_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--budgets", type=_floats, help="comma-separated budgets in Mul-Adds")
    p.add_argument("--exclude-same-camera", action="store_true")
    p.add_argument("--num-budgets", type=int, default=50,
                   help="size of the default grid from 0 to 1.1 x the last exit cost")
    p.add_argument("--baseline", choices=["sequential-ensemble"])
    p.add_argument("--train-data", help="training split for the baseline members")
    p.add_argument("--baseline-out", help="CSV path for the baseline curve")
    p.add_argument("--member-widths", type=lambda s: [_ints(w) for w in s.split(";")],
                   default=[(32, 64), (32, 64, 96), (32, 64, 96, 128)],
                   help="baseline member widths, members separated by ';'")
    _add_encoder_args(p)
    _add_train_args(p)
    p.set_defaults(func=cmd_anytime)

    p = sub.add_parser("stream", help="budgeted-stream sweep over exit policies")
    _add_tables_args(p)
    p.add_argument("--out", required=True,
                   help="CSV path; may contain '{strategy}' (required with --strategy all)")
    p.add_argument("--strategy", choices=[*STRATEGIES, "all"], default="margin")
    grid = p.add_mutually_exclusive_group()
    grid.add_argument("--a-values", type=_floats, help="comma-separated values of a")
    grid.add_argument("--budgets", type=_floats, help="comma-separated per-query budgets")
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--shuffle", action="store_true",
                   help="process the queries in a random order drawn from --seed")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_stream)

    p = sub.add_parser("solve-budget", help="print the a that spends a per-query budget")
    p.add_argument("--costs", type=_floats, required=True)
    p.add_argument("--budget", type=float, required=True)
    p.set_defaults(func=cmd_solve_budget)
    return parser


def _thread_limit() -> int | None:
    text = os.environ.get("DARE_THREADS", "0").strip() or "0"
    try:
        n = int(text)
    except ValueError:
        raise ValueError(f"DARE_THREADS must be an integer, got {text!r}") from None
    if n < 0:
        raise ValueError(f"DARE_THREADS must be >= 0, got {n}")
    return n or None


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with threadpool_limits(limits=_thread_limit()):
            args.func(args)
    except (ValueError, OSError) as exc:
        print(f"dare {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
