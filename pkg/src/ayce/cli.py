"""Command-line entry point.

Subcommands cover the whole pipeline: gen (synthetic corpus), stats,
finetune-text (stage 1), train (stage 2), embed, rank, eval, pca. Every run
prints its effective config and seed up front. Exit codes: 0 success,
1 usage error, 2 data/validation error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from pathlib import Path

from . import config as config_mod
from . import retrieval, synthetic, training
from .data import (
    compute_stats,
    load_caption_attributes,
    load_corpus,
    load_dataset,
)
from .errors import AyceError, ConfigError, NonFiniteLossError
from .metrics import pca_2d, write_pca_csv
from .text import (
    ProjectionHead,
    TextFinetuneConfig,
    ToySentenceEncoder,
    finetune_text,
    save_text_checkpoint,
)

DEFAULT_SEED_ENV = "AYCE_SEED"


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; this tool reserves 2 for data
    problems, so usage errors exit 1 instead."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common_parser():
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help=f"RNG seed (default: ${DEFAULT_SEED_ENV} or 0)")
    common.add_argument("--workdir", default=".",
                        help="directory that relative paths resolve against")
    return common


def _resolve_seed(args):
    if args.seed is not None:
        return args.seed
    return int(os.environ.get(DEFAULT_SEED_ENV, "0"))


def _path(args, value):
    p = Path(value)
    if p.is_absolute():
        return p
    return Path(args.workdir) / p


def _announce(effective, seed):
    print("config:", json.dumps(effective, sort_keys=True))
    print("seed:", seed)


# ---------------------------------------------------------------------------
# subcommand handlers


def cmd_gen(args):
    seed = _resolve_seed(args)
    if args.spec is not None:
        spec = synthetic.load_spec_file(_path(args, args.spec))
    else:
        spec = synthetic.SyntheticSpec()
    if args.n_tracks is not None:
        spec = dataclasses.replace(spec, n_tracks=args.n_tracks)
    spec.validate()
    _announce(spec.to_dict(), seed)
    corpus = synthetic.generate_synthetic(
        spec, seed,
        include_detections=not args.no_detections,
        include_crops=not args.no_crops)
    out_dir = _path(args, args.out)
    synthetic.write_corpus(corpus, out_dir)
    print(f"wrote {corpus.dataset.n} tracks to {out_dir}")
    return 0


def cmd_stats(args):
    seed = _resolve_seed(args)
    data_dir = _path(args, args.data)
    _announce({"data": str(data_dir)}, seed)
    dataset = load_dataset(data_dir / "dataset.json")
    attrs_path = data_dir / "caption_attributes.json"
    attrs = load_caption_attributes(attrs_path) if attrs_path.exists() else None
    stats = compute_stats(dataset, caption_attributes=attrs)
    print(json.dumps(stats.to_dict(), sort_keys=True, indent=2))
    return 0


def cmd_finetune_text(args):
    seed = _resolve_seed(args)
    cfg = TextFinetuneConfig(mode=args.mode, metric=args.metric, margin=args.margin,
                             epochs=args.epochs, batch_size=args.batch_size,
                             lr=args.lr, seed=seed)
    _announce({"finetune": cfg.to_dict(), "width": args.width}, seed)
    data_dir = _path(args, args.data)
    dataset = load_dataset(data_dir / "dataset.json")
    enc = ToySentenceEncoder.from_dataset(dataset, width=args.width, seed=seed)
    head = ProjectionHead(width=args.width, seed=seed + 1)
    enc, head, history = finetune_text(dataset, enc, head, cfg)
    out_path = _path(args, args.out)
    save_text_checkpoint(enc, head, out_path, mode=args.mode,
                         extra_config={"finetune": cfg.to_dict()})
    if args.history is not None:
        _write_text_history(_path(args, args.history), history)
    first, last = history[0].report, history[-1].report
    print(f"wrote {out_path}")
    print(f"d_intra: {first.d_intra_mean:.4f} -> {last.d_intra_mean:.4f}")
    print(f"d_inter: {first.d_inter_mean:.4f} -> {last.d_inter_mean:.4f}")
    return 0


def _write_text_history(path, history):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "d_intra_mean", "d_intra_var",
                         "d_inter_mean", "d_inter_var"])
        for rec in history:
            writer.writerow([rec.epoch, repr(rec.loss),
                             repr(rec.report.d_intra_mean), repr(rec.report.d_intra_var),
                             repr(rec.report.d_inter_mean), repr(rec.report.d_inter_var)])


def _override_sections(args):
    """Collect per-flag overrides into config sections, skipping unset ones."""
    return {
        "loss": {"margin": args.margin, "beta": args.beta, "metric": args.metric},
        "train": {"epochs": args.epochs, "batch_size": args.batch_size,
                  "lr": args.lr, "checkpoint_every": args.checkpoint_every},
    }


def cmd_train(args):
    seed = _resolve_seed(args)
    config_path = _path(args, args.config) if args.config else None
    effective = config_mod.effective_config(preset=args.preset,
                                            config_path=config_path,
                                            overrides=_override_sections(args))
    effective["train"]["seed"] = seed
    _announce({"variant": args.variant, **effective}, seed)
    corpus = load_corpus(_path(args, args.data))
    out_dir = _path(args, args.out)
    history_path = _path(args, args.history) if args.history else out_dir / "history.csv"
    branch, history = training.train_visual(
        corpus, _path(args, args.text), variant=args.variant,
        loss_cfg=config_mod.make_loss_config(effective),
        train_cfg=config_mod.make_train_config(effective, seed=seed),
        encoder_config=config_mod.make_encoder_config(effective),
        crop_size=config_mod.crop_size_of(effective),
        checkpoint_dir=out_dir, history_path=history_path,
        eval_every=args.eval_every,
        log=lambda row: print(
            f"epoch {row['epoch']}: loss {row['loss']:.4f} lr {row['lr']:g}"
            + (f" mrr {row['mrr']:.4f}" if row["mrr"] is not None else "")))
    if history:
        print(f"final loss: {history[-1]['loss']:.4f}")
    print(f"checkpoints in {out_dir}")
    return 0


def cmd_embed(args):
    seed = _resolve_seed(args)
    _announce({"model": args.model, "text": args.text, "data": args.data}, seed)
    corpus = load_corpus(_path(args, args.data))
    store = retrieval.embed_all(_path(args, args.model), _path(args, args.text),
                                corpus, seed)
    out = _path(args, args.out)
    if out.suffix != ".bin":
        out.mkdir(parents=True, exist_ok=True)
        out = out / retrieval.STORE_FILENAME
    retrieval.save_store(store, out)
    print(f"wrote {store.n} tracks ({store.variant}) to {out}")
    return 0


def cmd_rank(args):
    seed = _resolve_seed(args)
    _announce({"embeds": args.embeds, "direction": args.direction,
               "metric": args.metric, "rank_order": args.rank_order}, seed)
    store = retrieval.load_store(_path(args, args.embeds))
    table = retrieval.rank(store, direction=args.direction, metric=args.metric,
                           descending=args.rank_order == "desc")
    retrieval.write_submission(table, _path(args, args.out))
    print(f"ranked {len(table.orders)} queries -> {args.out}")
    return 0


def cmd_eval(args):
    seed = _resolve_seed(args)
    _announce({"embeds": args.embeds, "direction": args.direction,
               "metric": args.metric, "rank_order": args.rank_order}, seed)
    store = retrieval.load_store(_path(args, args.embeds))
    report = retrieval.evaluate(store, direction=args.direction, metric=args.metric,
                                descending=args.rank_order == "desc")
    print(f"mrr={report['mrr']:.4f}")
    print(f"top10={report['top10']:.4f}")
    if args.report is not None:
        retrieval.write_report(report, _path(args, args.report))
        print(f"report -> {args.report}")
    return 0


def cmd_pca(args):
    seed = _resolve_seed(args)
    _announce({"embeds": args.embeds, "side": args.side}, seed)
    store = retrieval.load_store(_path(args, args.embeds))
    source = store.visual if args.side == "visual" else store.text
    ids = store.ids
    # one point per track: average over the embedding rows of that side
    points = [source[tid].mean(axis=0) for tid in ids]
    result = pca_2d(points)
    write_pca_csv(ids, result.coords, _path(args, args.out))
    ev = result.explained_variance
    print(f"explained variance: {ev[0]:.6g}, {ev[1]:.6g}"
          + (" (degenerate)" if result.degenerate else ""))
    return 0


# ---------------------------------------------------------------------------
# parser assembly


def build_parser():
    common = _common_parser()
    parser = _Parser(prog="ayce",
                     description="two-branch vehicle retrieval pipeline")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--spec", default=None, help="generator spec JSON")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--n-tracks", type=int, default=None, help="override track count")
    p.add_argument("--no-detections", action="store_true")
    p.add_argument("--no-crops", action="store_true")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("stats", parents=[common], help="print corpus statistics")
    p.add_argument("--data", required=True, help="corpus directory")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("finetune-text", parents=[common],
                       help="stage 1: fit the sentence encoder and projection head")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="text.ckpt")
    p.add_argument("--mode", choices=("lto", "lso"), default="lto")
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--margin", type=float, default=1.0)
    p.add_argument("--metric", choices=("cosine", "euclidean"), default="cosine")
    p.add_argument("--history", default=None, help="separation history CSV")
    p.set_defaults(func=cmd_finetune_text)

    p = sub.add_parser("train", parents=[common],
                       help="stage 2: train the visual branch against frozen text")
    p.add_argument("--data", required=True)
    p.add_argument("--text", required=True, help="stage-1 checkpoint")
    p.add_argument("--out", default="run", help="checkpoint directory")
    p.add_argument("--preset", choices=sorted(config_mod.PRESETS), default="desk")
    p.add_argument("--config", default=None, help="TOML config file")
    p.add_argument("--variant", type=str.lower,
                   choices=training.VARIANT_NAMES, default="vt-lt")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--margin", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--metric", choices=("cosine", "euclidean"), default=None)
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--eval-every", type=int, default=0,
                   help="record MRR every this many epochs (0: never)")
    p.add_argument("--history", default=None, help="history CSV (default: out/history.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", parents=[common], help="embed a corpus on both sides")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, help="stage-2 checkpoint")
    p.add_argument("--text", required=True, help="stage-1 checkpoint")
    p.add_argument("--out", default="embeds", help=".bin file or directory")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("rank", parents=[common], help="write a submission file")
    p.add_argument("--embeds", required=True, help="store file or its directory")
    p.add_argument("--direction", choices=retrieval.DIRECTIONS, default="text_to_visual")
    p.add_argument("--metric", choices=("cosine", "euclidean"), default="euclidean")
    p.add_argument("--rank-order", choices=("asc", "desc"), default="asc")
    p.add_argument("--out", default="submission.json")
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("eval", parents=[common], help="score retrieval by MRR")
    p.add_argument("--embeds", required=True)
    p.add_argument("--direction", choices=retrieval.DIRECTIONS, default="text_to_visual")
    p.add_argument("--metric", choices=("cosine", "euclidean"), default="euclidean")
    p.add_argument("--rank-order", choices=("asc", "desc"), default="asc")
    p.add_argument("--report", default=None, help="write the full report JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pca", parents=[common], help="export 2-D projections")
    p.add_argument("--embeds", required=True)
    p.add_argument("--side", choices=("visual", "text"), default="visual")
    p.add_argument("--out", default="pca.csv")
    p.set_defaults(func=cmd_pca)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args) or 0
    except NonFiniteLossError as exc:
        detail = f" (batch seed {exc.batch_seed})" if exc.batch_seed else ""
        print(f"ayce: numeric failure: {exc}{detail}", file=sys.stderr)
        return 3
    except ConfigError as exc:
        print(f"ayce: {exc}", file=sys.stderr)
        return 1
    except (AyceError, FileNotFoundError) as exc:
        print(f"ayce: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
