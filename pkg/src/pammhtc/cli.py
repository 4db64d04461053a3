"""Command-line entry point: ``pammhtc <command> [flags]``.

Commands: ``gen-data``, ``train``, ``eval``, ``inspect-mask``, ``export-attention``.
Any flag may also come from a ``--config`` file of ``key = value`` lines,
where keys are flag names with dashes or underscores.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import model as M
from .datagen import SynthSpec, corpus_stats, generate, read_corpus
from .evalinfer import evaluate_examples, export_attention
from .hierarchy import HierarchyError, orphans, read_hierarchy
from .labelseq import BOS, Vocabulary
from .pamm import build_mask
from .train import Checkpoint, Example, TrainConfig, make_batch, target_sequence, train

log = logging.getLogger("pammhtc")


class CLIError(Exception):
    pass


def read_config(path: str | Path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CLIError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _branching(text: str) -> tuple[int, ...]:
    try:
        values = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"branching must be comma-separated integers, got {text!r}")
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError(f"branching factors must be positive, got {text!r}")
    return values


def _examples(path) -> list[Example]:
    return [Example(r["text"], list(r["labels"])) for r in read_corpus(path)]


def _model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--d-model", type=int, default=64)
    g.add_argument("--heads", type=int, default=4)
    g.add_argument("--blocks", type=int, default=2)
    g.add_argument("--d-ff", type=int, default=128)
    g.add_argument("--dropout", type=float, default=0.1)
    g.add_argument("--max-src-len", type=int, default=300)
    g.add_argument("--max-tgt-len", type=int, default=60)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pammhtc", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="key = value file with flag defaults")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic hierarchy and corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--levels", type=int, help="defaults to the number of branching factors")
    p.add_argument("--branching", type=_branching, default=(3, 3, 3))
    p.add_argument("--text-vocab-size", type=int, default=600)
    p.add_argument("--signal-words", type=int, default=3)
    p.add_argument("--signal-tokens", type=int, default=2)
    p.add_argument("--signal-dropout", type=float, default=0.0)
    p.add_argument("--noise-rate", type=float, default=0.5)
    p.add_argument("--max-paths", type=int, default=3)
    p.add_argument("--multi-path-rate", type=float, default=0.4)
    p.add_argument("--truncate-rate", type=float, default=0.0)
    p.add_argument("--zipf", type=float, default=1.0)
    p.add_argument("--cousin-share", type=float, default=0.0)
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-val", type=int, default=400)
    p.add_argument("--n-test", type=int, default=400)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train a model and keep the best-validation checkpoint")
    p.add_argument("--hierarchy", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--val")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--init", help="checkpoint to continue from")
    p.add_argument("--rho", type=float, default=100.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--batch", type=int, default=10)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--clip", type=float, default=1.0)
    p.add_argument("--flat-labels", action="store_true")
    p.add_argument("--pamm-rows", choices=("all", "labels"), default="all")
    p.add_argument("--pamm-reduction", choices=("sample", "batch"), default="sample")
    p.add_argument("--select-on", choices=("micro_f1", "macro_f1", "mean_f1"), default="mean_f1")
    p.add_argument("--jobs", type=int, default=1)
    _model_flags(p)

    p = sub.add_parser("eval", help="greedy-decode a corpus and score it")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--hierarchy", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--max-tgt-len", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("inspect-mask", help="print the path-adaptive mask of a label set")
    p.add_argument("--hierarchy", required=True)
    p.add_argument("--labels", required=True, help="comma-separated label set")
    p.add_argument("--flat-labels", action="store_true")
    p.add_argument("--csv", help="also write the mask as CSV")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("export-attention", help="dump a decoder self-attention map as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--hierarchy", required=True)
    p.add_argument("--corpus", "--test", dest="corpus", required=True)
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--block", type=int, default=0)
    p.add_argument("--head", type=int, help="head index; omit to average heads")
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--seed", type=int, default=0)
    return parser


def cmd_gen_data(args) -> int:
    spec = SynthSpec(levels=len(args.branching), branching=args.branching, text_vocab_size=args.text_vocab_size,
                     signal_words_per_label=args.signal_words, signal_tokens=args.signal_tokens,
                     signal_dropout=args.signal_dropout, noise_rate=args.noise_rate,
                     max_paths=args.max_paths, multi_path_rate=args.multi_path_rate,
                     truncate_rate=args.truncate_rate, zipf=args.zipf, cousin_share=args.cousin_share,
                     n_train=args.n_train, n_val=args.n_val, n_test=args.n_test, seed=args.seed)
    corpus = generate(spec)
    paths = corpus.write(args.out)
    h = corpus.hierarchy
    levels = range(1, h.n_levels + 1)
    print(f"labels: {len(h)}  depth: {h.n_levels}  " +
          "  ".join(f"level{lv}: {len(h.labels_at(lv))}" for lv in levels))
    header = f"{'split':<6} {'samples':>7} {'avg|Li|':>8} {'max|Li|':>8} {'multi':>6} " + \
        " ".join(f"{'level' + str(lv):>7}" for lv in levels)
    print(header)
    for name, records in corpus.splits.items():
        st = corpus_stats(h, records)
        print(f"{name:<6} {st['samples']:>7} {st['avg_labels']:>8.2f} {st['max_labels']:>8} "
              f"{st['multi_path']:>6} " + " ".join(f"{st['per_level'][lv]:>7}" for lv in levels))
    for name, path in paths.items():
        print(f"wrote {name}: {path}")
    return 0


def cmd_train(args) -> int:
    h = read_hierarchy(args.hierarchy)
    train_set = _examples(args.train)
    val_set = _examples(args.val) if args.val else []
    if not train_set:
        raise CLIError(f"training corpus {args.train} is empty")
    init = Checkpoint.load(args.init) if args.init else None
    if init is not None:
        vocab = init.vocab
        cfg = init.config
        for ex in train_set:
            missing = [lab for lab in ex.labels if lab not in vocab]
            if missing:
                raise CLIError(f"label {missing[0]!r} is not in the checkpoint vocabulary")
    else:
        vocab = Vocabulary.build(h, [ex.text for ex in train_set])
        cfg = M.ModelConfig(vocab_size=len(vocab), n_out=vocab.n_decoder, d_model=args.d_model,
                            n_heads=args.heads, n_blocks=args.blocks, d_ff=args.d_ff,
                            max_src_len=args.max_src_len, max_tgt_len=args.max_tgt_len,
                            dropout=args.dropout)
    for ex in train_set + val_set:
        unknown = [lab for lab in ex.labels if lab not in h]
        if unknown:
            raise CLIError(f"corpus label {unknown[0]!r} is not in the hierarchy")
    tcfg = TrainConfig(rho=args.rho, lr=args.lr, batch_size=args.batch, epochs=args.epochs,
                       seed=args.seed, clip_norm=args.clip if args.clip > 0 else None,
                       pamm_rows=args.pamm_rows, pamm_reduction=args.pamm_reduction,
                       flat_labels=args.flat_labels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / "vocab.tsv")
    result = train(train_set, val_set, h, vocab, cfg, tcfg, log_path=out / "train_log.jsonl",
                   checkpoint_path=out / "checkpoint.npz", init=init, select_on=args.select_on,
                   jobs=args.jobs)
    (out / "run_config.json").write_text(
        json.dumps({"model": asdict(cfg), "train": asdict(tcfg)}, indent=2, sort_keys=True) + "\n")
    for rec in result.history:
        print(json.dumps(rec, sort_keys=True))
    print(f"best epoch {result.best_epoch}; checkpoint {out / 'checkpoint.npz'}")
    return 0


def cmd_eval(args) -> int:
    ck = Checkpoint.load(args.checkpoint)
    h = read_hierarchy(args.hierarchy)
    examples = _examples(args.test)
    if not examples:
        raise CLIError(f"test corpus {args.test} is empty")
    report = evaluate_examples(ck, h, examples, max_len=args.max_tgt_len, jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval_report.txt").write_text(report.to_text(), encoding="utf-8")
    (out / "per_label.csv").write_text(report.per_label_csv(), encoding="utf-8")
    sys.stdout.write(report.to_text())
    return 0


def cmd_inspect_mask(args) -> int:
    h = read_hierarchy(args.hierarchy)
    labels = [s.strip() for s in args.labels.split(",") if s.strip()]
    unknown = [lab for lab in labels if lab not in h]
    if unknown:
        raise CLIError(f"unknown label {unknown[0]!r}")
    missing = orphans(h, labels)
    if missing and not args.flat_labels:
        raise CLIError(f"inconsistent label set: {missing[0]!r} has no parent "
                       f"{h.parent[missing[0]]!r} in the set")
    seq = target_sequence(h, labels, args.flat_labels)
    mask = build_mask(h, seq)
    print(" ".join(seq.tokens))
    print(mask.to_text(seq.tokens))
    if args.csv:
        Path(args.csv).write_text(mask.to_csv(seq.tokens), encoding="utf-8")
    return 0


def cmd_export_attention(args) -> int:
    ck = Checkpoint.load(args.checkpoint)
    h = read_hierarchy(args.hierarchy)
    examples = _examples(args.corpus)
    if not 0 <= args.sample < len(examples):
        raise CLIError(f"sample index {args.sample} out of range (corpus has {len(examples)})")
    if not 0 <= args.block < ck.config.n_blocks:
        raise CLIError(f"block {args.block} out of range (model has {ck.config.n_blocks})")
    if args.head is not None and not 0 <= args.head < ck.config.n_heads:
        raise CLIError(f"head {args.head} out of range (model has {ck.config.n_heads})")
    ex = examples[args.sample]
    batch = make_batch([ex], h, ck.vocab, ck.config, ck.flat_labels)
    trace = M.forward(ck.params, ck.config, batch.src, batch.tgt_in, batch.src_mask, batch.tgt_mask)
    tokens = [BOS] + list(target_sequence(h, ex.labels, ck.flat_labels).tokens)
    mat = export_attention(trace, tokens, args.out, args.block, args.head)
    print(f"wrote {mat.shape[0]}x{mat.shape[1]} attention map to {args.out}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "inspect-mask": cmd_inspect_mask,
    "export-attention": cmd_export_attention,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        try:
            defaults = read_config(known.config)
        except (OSError, CLIError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        for action in parser._subparsers._group_actions[0].choices.values():
            dests = {a.dest: a for a in action._actions}
            action.set_defaults(**{k: (dests[k].type(v) if dests[k].type else
                                       (v.lower() in ("1", "true", "yes") if isinstance(dests[k].default, bool) else v))
                                    for k, v in defaults.items() if k in dests})
    args = parser.parse_args(argv)
    if args.command == "gen-data" and args.levels is not None and args.levels != len(args.branching):
        parser.error(f"--branching has {len(args.branching)} factors but --levels is {args.levels}")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (CLIError, HierarchyError, ValueError, KeyError, OSError, FloatingPointError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
