"""Command-line entry point: ``bert4xmr <command> [flags]``.

Exit codes: 0 ok, 2 config error, 3 data error, 4 protocol error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from collections import defaultdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import pipeline
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, resolve_config
from .data import (
    Catalog,
    DataFormatError,
    SyntheticSpec,
    dataset_statistics,
    filter_min_interactions,
    load_interactions,
    synthesize_markets,
    write_interactions,
    write_statistics,
)
from .evaluation import METRIC_NAMES, export_embeddings, format_reports
from .numerics import ProtocolError

logger = logging.getLogger("bert4xmr")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_PROTOCOL = 0, 2, 3, 4

CONFIG_FLAGS = {
    # flag: (type, help)
    "data": (str, "interaction TSV"),
    "out-dir": (str, "output directory"),
    "seed": (int, "global seed"),
    "d": (int, "embedding dimension"),
    "n-layers": (int, "transformer layers"),
    "n-heads": (int, "attention heads"),
    "max-len": (int, "sequence length incl. candidate slot"),
    "dropout": (float, "dropout rate"),
    "ffn-hidden": (int, "inner feed-forward width (default 4*d)"),
    "per-head-scale": (str, "scale attention by sqrt(d/g) instead of sqrt(d) (true/false)"),
    "lr": (float, "Adam learning rate"),
    "l2": (float, "L2 coefficient"),
    "beta1": (float, "Adam beta1"),
    "beta2": (float, "Adam beta2"),
    "max-epochs": (int, "epoch cap"),
    "patience": (int, "early-stopping patience"),
    "batch-size": (int, "mini-batch size"),
    "train-neg-ratio": (int, "training negatives per positive"),
    "eval-negatives": (int, "sampled negatives per evaluated user"),
    "min-interactions": (int, "user/item filtering threshold"),
    "market": (str, "target market key"),
}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value config file; flags override it")
    for flag, (kind, help_text) in CONFIG_FLAGS.items():
        parser.add_argument(f"--{flag}", type=kind, default=None, help=help_text)


def _resolve(args: argparse.Namespace) -> RunConfig:
    overrides = {flag.replace("-", "_"): getattr(args, flag.replace("-", "_")) for flag in CONFIG_FLAGS}
    cfg = resolve_config(args.config, overrides)
    print(f"# resolved config (seed={cfg.seed})")
    print(cfg.dumps(), end="")
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.dumps(), encoding="utf-8")
    return out


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# ------------------------------------------------------------------ commands


def cmd_gen_data(args) -> int:
    users = [int(x) for x in args.users.split(",") if x]
    if args.markets is not None and args.markets != len(users):
        raise ConfigError(f"--markets {args.markets} does not match {len(users)} user counts")
    names = args.names.split(",") if args.names else None
    spec = SyntheticSpec(users, args.items, args.per_user, args.beta, args.latent_dim, names)
    print(f"# gen-data seed={args.seed} markets={len(users)} users={users} items={args.items} "
          f"per_user={args.per_user} beta={args.beta}")
    try:
        records = synthesize_markets(spec, np.random.default_rng(args.seed))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    write_interactions(records, args.out)
    print(f"# wrote {len(records)} interactions to {args.out}")
    return EXIT_OK


def cmd_stats(args) -> int:
    records = load_interactions(args.data)
    if not args.raw:
        records = filter_min_interactions(records, args.min_interactions)
    rows = dataset_statistics(records)
    if args.out:
        write_statistics(rows, args.out)
    else:
        write_statistics(rows, sys.stdout)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _resolve(args)
    seed = cfg.require_seed()
    records = load_interactions(cfg.require_data())
    out = _out_dir(cfg)
    dataset = pipeline.build_dataset(records, cfg, seed)
    result = pipeline.pretrain(cfg, dataset, seed, market_emb=not args.no_market_emb)
    save_checkpoint(pipeline.to_checkpoint(result, dataset, "pretrain", seed), out / "pretrain.ckpt")
    (out / "pretrain_log.tsv").write_text(result.log_tsv(), encoding="utf-8")
    reports = pipeline.evaluate_all(result.params, dataset, "test")
    (out / "pretrain_eval.tsv").write_text(format_reports(reports), encoding="utf-8")
    print(format_reports(reports), end="")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _resolve(args)
    seed = cfg.require_seed()
    if cfg.market is None:
        raise ConfigError("finetune needs --market")
    ckpt = load_checkpoint(args.checkpoint)
    records = load_interactions(cfg.require_data())
    out = _out_dir(cfg)
    dataset = pipeline.build_dataset(records, cfg, seed, ckpt)
    market = dataset.catalog.market_id(cfg.market)
    result = pipeline.finetune(cfg, dataset, ckpt.params, market, seed)
    stem = f"finetune_{cfg.market}"
    save_checkpoint(pipeline.to_checkpoint(result, dataset, "finetune", seed, cfg.market), out / f"{stem}.ckpt")
    (out / f"{stem}_log.tsv").write_text(result.log_tsv(), encoding="utf-8")
    reports = pipeline.evaluate_all(result.params, dataset, "test", [market])
    (out / f"{stem}_eval.tsv").write_text(format_reports(reports), encoding="utf-8")
    print(format_reports(reports), end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    ckpt = load_checkpoint(args.checkpoint)
    seed = cfg.seed if cfg.seed is not None else ckpt.provenance.get("seed")
    if seed is None:
        raise ConfigError("no seed given and none recorded in the checkpoint")
    records = load_interactions(cfg.require_data())
    dataset = pipeline.build_dataset(records, cfg, seed, ckpt)
    markets = None if cfg.market is None else [dataset.catalog.market_id(cfg.market)]
    reports = pipeline.evaluate_all(ckpt.params, dataset, args.split, markets)
    _emit(format_reports(reports, detail=args.detail), args.out)
    return EXIT_OK


def cmd_export_emb(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    catalog = Catalog(ckpt.items, ckpt.markets)
    _emit(export_embeddings(ckpt.params, catalog, args.mode), args.out)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _resolve(args)
    seed = cfg.require_seed()
    records = load_interactions(cfg.require_data())
    out = _out_dir(cfg)
    markets = [cfg.market] if cfg.market else None
    rows = []
    for s in range(seed, seed + args.seeds):
        rows.extend(pipeline.run_ablation_seed(records, cfg, s, markets))
    lines = [pipeline.ABLATION_HEADER] + [r.tsv() for r in rows]
    text = "\n".join(lines) + "\n"
    (out / "ablation.tsv").write_text(text, encoding="utf-8")

    grouped = defaultdict(list)
    for r in rows:
        grouped[(r.market, r.arm)].append(r.report)
    summary = ["market\tarm\tseeds\t" + "\t".join(METRIC_NAMES)]
    for (market, arm), reps in grouped.items():
        means = [sum(rep.mean(m) for rep in reps) / len(reps) for m in METRIC_NAMES]
        summary.append(f"{market}\t{arm}\t{len(reps)}\t" + "\t".join(f"{v:.6f}" for v in means))
    (out / "ablation_summary.tsv").write_text("\n".join(summary) + "\n", encoding="utf-8")
    print(text, end="")
    print("\n".join(summary))
    return EXIT_OK


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bert4xmr", description="Cross-market transformer recommender")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic multi-market interaction TSV")
    p.add_argument("--markets", type=int)
    p.add_argument("--users", required=True, help="comma-separated user count per market")
    p.add_argument("--items", type=int, required=True)
    p.add_argument("--per-user", type=int, required=True)
    p.add_argument("--beta", type=float, default=0.0, help="market bias strength")
    p.add_argument("--latent-dim", type=int, default=8)
    p.add_argument("--names", help="comma-separated market keys (default m0,m1,...)")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("stats", help="per-market #User/#Item/#Ratings/Avg.length")
    p.add_argument("--data", required=True)
    p.add_argument("--raw", action="store_true", help="skip the minimum-interaction filter")
    p.add_argument("--min-interactions", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("pretrain", help="train on all markets pooled")
    _add_config_flags(p)
    p.add_argument("--no-market-emb", action="store_true", help="zero and freeze the market table")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="continue training on one market")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="ranking metrics for a checkpoint")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("val", "test"), default="test")
    p.add_argument("--detail", action="store_true", help="append per-user rows")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-emb", help="dump item/market embeddings")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=("raw", "pca2"), default="raw")
    p.add_argument("--out")
    p.set_defaults(func=cmd_export_emb)

    p = sub.add_parser("ablate", help="compare full / no-market-emb / single-market / no-finetune")
    _add_config_flags(p)
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, CheckpointError, OSError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ProtocolError as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL


if __name__ == "__main__":
    sys.exit(main())
