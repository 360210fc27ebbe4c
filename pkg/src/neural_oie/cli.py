"""Command-line entry point: ``neural-oie {gen,bootstrap,train,extract,eval}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import evaluation as ev
from .inference import BeamConfig, extract_corpus
from .model import ModelConfig
from .text import (
    LoadReport, MalformedLine, TaggedParseError, filter_pair, gen_synthetic, load_pairs, load_tagged, parse_tagged,
    write_pairs, write_tagged,
)
from .training import CheckpointError, TrainConfig, desk_configs, load_checkpoint, train

log = logging.getLogger("neural_oie")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

# flag -> (full-scale default, desk default); None means "not part of the preset"
_MODEL_FLAGS = {
    "layers": ("num_layers", 3),
    "hidden": ("hidden_dim", 256),
    "embed": ("embed_dim", 256),
}
_TRAIN_FLAGS = {
    "epochs": ("epochs", 40),
    "lr": ("lr0", 1.0),
    "decay": ("decay", 0.7),
    "decay_start": ("decay_start_epoch", 11),
    "dropout": ("dropout", 0.3),
    "partitions": ("partitions", 20),
    "batch": ("batch_size", 64),
    "vocab_size": ("vocab_max_size", 50010),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _desk_defaults() -> dict:
    model, tr = desk_configs()
    vals = {}
    for flag, (field, _) in _MODEL_FLAGS.items():
        vals[flag] = getattr(model, field)
    for flag, (field, _) in _TRAIN_FLAGS.items():
        vals[flag] = getattr(tr, field)
    return vals


def build_parser() -> argparse.ArgumentParser:
    desk = _desk_defaults()
    p = _Parser(prog="neural-oie", description="Neural Open IE: bootstrap, train, extract, evaluate.")
    p.add_argument("-v", "--verbose", action="store_true", help="log at DEBUG level")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def seed(sp):
        sp.add_argument("--seed", type=int, default=0, help="single source of randomness (default: 0)")

    g = sub.add_parser("gen", help="write synthetic training pairs")
    g.add_argument("--n", type=int, required=True, help="number of pairs")
    g.add_argument("--out", required=True, help="training-pair TSV to write")
    g.add_argument("--sentences-out", help="also write sentence_id<TAB>sentence lines")
    g.add_argument("--gold-out", help="also write the pairs as a gold benchmark TSV")
    seed(g)

    b = sub.add_parser("bootstrap", help="filter raw pairs and write tagged pairs for training")
    b.add_argument("--input", required=True, help="raw training-pair TSV")
    b.add_argument("--out", required=True, help="tagged-pair TSV to write")
    b.add_argument("--min-conf", type=float, default=0.9, help="minimum confidence kept (default: 0.9)")
    b.add_argument("--max-len", type=int, default=40, help="maximum sentence length in tokens (default: 40)")
    b.add_argument("--strict", action="store_true", help="abort on the first malformed line")

    t = sub.add_parser("train", help="train a model on tagged pairs")
    t.add_argument("--data", required=True, help="tagged-pair TSV")
    t.add_argument("--val", help="optional tagged-pair TSV for validation perplexity")
    t.add_argument("--out-dir", required=True, help="directory for checkpoints and history.csv")
    for flag, (field, full) in {**_MODEL_FLAGS, **_TRAIN_FLAGS}.items():
        typ = type(full)
        t.add_argument(
            "--" + flag.replace("_", "-"), type=typ, default=None, dest=flag,
            help=f"{field} (default: {full}; --desk: {desk[flag]})",
        )
    t.add_argument("--desk", action="store_true", help="small CPU preset: " + ", ".join(f"{k}={v}" for k, v in desk.items()))
    t.add_argument("--precision", type=int, choices=(32, 64), default=64, help="float width (default: 64)")
    t.add_argument("--clip", type=float, default=5.0, help="global gradient-norm clip (default: 5.0)")
    seed(t)

    x = sub.add_parser("extract", help="extract tuples with a trained checkpoint")
    x.add_argument("--model", required=True, help="checkpoint file")
    x.add_argument("--input", required=True, help="sentence_id<TAB>sentence file")
    x.add_argument("--out", required=True, help="prediction TSV to write")
    x.add_argument("--beam", type=int, default=10, help="beam width (default: 10)")
    x.add_argument("--topk", type=int, default=5, help="extractions kept per sentence (default: 5)")
    x.add_argument("--max-decode-len", type=int, default=80, help="decoding length cap (default: 80)")
    x.add_argument("--threads", type=int, default=1, help="worker threads; output order is preserved (default: 1)")

    e = sub.add_parser("eval", help="score predictions against gold and write P-R reports")
    e.add_argument("--gold", required=True, help="gold TSV")
    e.add_argument("--pred", required=True, action="append", help="prediction TSV (repeatable)")
    e.add_argument("--label", action="append", help="system label per --pred (default: file stem)")
    e.add_argument("--out-dir", default="report", help="report directory (default: report)")
    e.add_argument("--threshold", type=float, default=0.5, help="per-slot overlap threshold (default: 0.5)")
    e.add_argument("--case-sensitive", action="store_true", help="match tokens case-sensitively")
    return p


def _cmd_gen(args) -> int:
    pairs = gen_synthetic(args.n, args.seed)
    write_pairs(args.out, pairs)
    if args.sentences_out:
        with open(args.sentences_out, "w", encoding="utf-8", newline="\n") as fh:
            for i, p in enumerate(pairs):
                fh.write(f"{i}\t{' '.join(p.sentence)}\n")
    if args.gold_out:
        golds = [ev.GoldExtraction(str(i), tuple(p.arg1), tuple(p.rel), tuple(p.arg2), tuple(p.sentence)) for i, p in enumerate(pairs)]
        ev.write_gold(args.gold_out, golds)
    print(f"wrote {len(pairs)} pairs to {args.out}")
    return EXIT_OK


def _cmd_bootstrap(args) -> int:
    report = LoadReport()
    kept = []
    total = 0
    for pair in load_pairs(args.input, strict=args.strict, report=report):
        total += 1
        if filter_pair(pair, max_len=args.max_len, min_conf=args.min_conf):
            kept.append(pair)
    write_tagged(args.out, kept)
    print(f"read {total} pairs ({len(report.skipped)} malformed lines skipped); kept {len(kept)}, dropped {total - len(kept)}")
    return EXIT_OK


def _resolve(args, table, desk_vals) -> dict:
    out = {}
    for flag, (field, full) in table.items():
        val = getattr(args, flag)
        if val is None:
            val = desk_vals[flag] if args.desk else full
        out[field] = val
    return out


def _cmd_train(args) -> int:
    desk_model, desk_train = desk_configs()
    desk_vals = _desk_defaults()
    model_kw = _resolve(args, _MODEL_FLAGS, desk_vals)
    train_kw = _resolve(args, _TRAIN_FLAGS, desk_vals)
    base = desk_model if args.desk else ModelConfig()
    model_cfg = ModelConfig(**{**base.to_dict(), **model_kw, "dropout": train_kw["dropout"], "precision": args.precision})
    cfg = TrainConfig(**train_kw, seed=args.seed, precision=args.precision, grad_clip_norm=args.clip)
    data = load_tagged(args.data)
    val = load_tagged(args.val) if args.val else []
    for _, tgt in data + val:
        parse_tagged(tgt)
    _, history, _ = train(data, val, cfg, model_cfg, out_dir=args.out_dir)
    last = history.records[-1]
    print(f"trained {len(history.records)} epochs; final loss {last.loss:.4f}; checkpoints in {args.out_dir}")
    return EXIT_OK


def _cmd_extract(args) -> int:
    ck = load_checkpoint(args.model)
    beam = BeamConfig(beam_width=args.beam, top_k=args.topk, max_decode_len=args.max_decode_len)
    stats = extract_corpus(args.input, ck.params, ck.vocab, beam, args.out, threads=args.threads)
    print(
        f"{stats.sentences} sentences, {stats.extractions} extractions, "
        f"{stats.sentences_per_second:.1f} sentences/s, malformed rate {stats.malformed_rate:.3f}"
    )
    return EXIT_OK


def _cmd_eval(args) -> int:
    labels = args.label or []
    if labels and len(labels) != len(args.pred):
        raise UsageError("give one --label per --pred")
    cfg = ev.MatchConfig(threshold=args.threshold, case_sensitive=args.case_sensitive)
    golds = ev.load_gold(args.gold)
    reports = []
    for i, path in enumerate(args.pred):
        label = labels[i] if labels else Path(path).stem
        rep = ev.evaluate(ev.load_predictions(path), golds, cfg, label)
        reports.append(rep)
        print(f"{label}: AUC {rep.auc:.6f} over {len(rep.points)} P-R points")
    ev.emit_report(reports, args.out_dir)
    return EXIT_OK


_COMMANDS = {
    "gen": _cmd_gen, "bootstrap": _cmd_bootstrap, "train": _cmd_train,
    "extract": _cmd_extract, "eval": _cmd_eval,
}


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, IsADirectoryError, MalformedLine, CheckpointError, TaggedParseError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"invalid configuration or data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.exception("command failed")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
