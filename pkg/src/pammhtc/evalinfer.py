"""Greedy decoding and hierarchical classification metrics."""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from . import model as M
from .hierarchy import LabelHierarchy, is_consistent
from .labelseq import BOS, SYMBOLS, encode_text, parse_sequence

if TYPE_CHECKING:
    from .train import Checkpoint, Example


def greedy_decode_batch(params, cfg: M.ModelConfig, srcs: Sequence[Sequence[int]],
                        bos_id: int, eos_id: int, pad_id: int = 0,
                        max_len: int | None = None, batch_size: int = 128) -> list[list[int]]:
    """Argmax decoding for many sources; each output stops after its first EOS.

    ``np.argmax`` returns the first maximum, so ties go to the lowest id.
    """
    max_len = cfg.max_tgt_len if max_len is None else max_len
    if max_len > cfg.max_tgt_len:
        raise ValueError(f"max_len={max_len} exceeds the decoder limit {cfg.max_tgt_len}")
    out: list[list[int]] = []
    for start in range(0, len(srcs), batch_size):
        chunk = [list(s) for s in srcs[start:start + batch_size]]
        N = len(chunk)
        S = max(len(s) for s in chunk)
        src = np.full((N, S), pad_id, dtype=np.int64)
        src_mask = np.zeros((N, S), dtype=bool)
        for i, s in enumerate(chunk):
            src[i, :len(s)] = s
            src_mask[i, :len(s)] = True
        o_text = M.encoder_forward(params, cfg, src, src_mask)
        dec = M.IncrementalDecoder(params, cfg, o_text, src_mask)
        tgt = np.full((N, 1), bos_id, dtype=np.int64)
        done = np.zeros(N, dtype=bool)
        for _ in range(max_len):
            logits = dec.step(tgt[:, -1])
            nxt = np.argmax(logits, axis=-1)
            nxt = np.where(done, pad_id, nxt)
            tgt = np.concatenate([tgt, nxt[:, None]], axis=1)
            done |= nxt == eos_id
            if done.all():
                break
        for i in range(N):
            seq = []
            for tok in tgt[i, 1:]:
                if tok == pad_id and done[i]:
                    break
                seq.append(int(tok))
                if tok == eos_id:
                    break
            out.append(seq)
    return out


def greedy_decode(params, cfg: M.ModelConfig, src: Sequence[int], bos_id: int, eos_id: int,
                  max_len: int | None = None) -> list[int]:
    return greedy_decode_batch(params, cfg, [src], bos_id, eos_id, max_len=max_len)[0]


# ---------------------------------------------------------------- metrics

def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def micro_f1(gold: Sequence[Iterable[str]], pred: Sequence[Iterable[str]]) -> float:
    if len(gold) != len(pred):
        raise ValueError("gold and pred must be aligned")
    tp = fp = fn = 0
    for g, p in zip(gold, pred):
        g, p = set(g), set(p)
        tp += len(g & p)
        fp += len(p - g)
        fn += len(g - p)
    return _prf(tp, fp, fn)[2]


def label_counts(gold, pred, labels: Sequence[str]) -> dict[str, tuple[int, int, int]]:
    counts = {lab: [0, 0, 0] for lab in labels}
    for g, p in zip(gold, pred):
        g, p = set(g), set(p)
        for lab in g & p:
            if lab in counts:
                counts[lab][0] += 1
        for lab in p - g:
            if lab in counts:
                counts[lab][1] += 1
        for lab in g - p:
            if lab in counts:
                counts[lab][2] += 1
    return {k: tuple(v) for k, v in counts.items()}


def per_label_scores(gold, pred, h: LabelHierarchy) -> list[dict]:
    rows = []
    for lab, (tp, fp, fn) in label_counts(gold, pred, h.labels).items():
        p, r, f = _prf(tp, fp, fn)
        rows.append({"label": lab, "level": h.depth[lab], "precision": p, "recall": r,
                     "f1": f, "support": tp + fn})
    return rows


def macro_f1(gold, pred, h: LabelHierarchy) -> float:
    """Uniform average of per-label F1 over every label in the hierarchy."""
    if len(gold) != len(pred):
        raise ValueError("gold and pred must be aligned")
    rows = per_label_scores(gold, pred, h)
    return float(np.mean([r["f1"] for r in rows])) if rows else 0.0


def per_level_macro_f1(gold, pred, h: LabelHierarchy) -> dict[int, float]:
    by_level: dict[int, list[float]] = {}
    for r in per_label_scores(gold, pred, h):
        by_level.setdefault(r["level"], []).append(r["f1"])
    return {lvl: float(np.mean(v)) for lvl, v in sorted(by_level.items())}


def inconsistency_rate(pred: Sequence[Iterable[str]], h: LabelHierarchy) -> float:
    """Fraction of predictions with a label whose ancestor is absent."""
    if not pred:
        return 0.0
    bad = sum(not is_consistent(h, [lab for lab in p if lab in h]) for p in pred)
    return bad / len(pred)


@dataclass
class EvalReport:
    micro_f1: float
    macro_f1: float
    per_level_macro_f1: dict[int, float]
    inconsistency_rate: float
    n_samples: int
    malformed_token_rate: float = 0.0
    per_label: list[dict] = field(default_factory=list)

    def to_text(self) -> str:
        lines = [
            f"n_samples = {self.n_samples}",
            f"micro_f1 = {self.micro_f1:.6f}",
            f"macro_f1 = {self.macro_f1:.6f}",
        ]
        lines += [f"macro_f1_level{k} = {v:.6f}" for k, v in self.per_level_macro_f1.items()]
        lines += [f"inconsistency_rate = {self.inconsistency_rate:.6f}",
                  f"malformed_token_rate = {self.malformed_token_rate:.6f}"]
        return "\n".join(lines) + "\n"

    def per_label_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["label", "level", "precision", "recall", "f1", "support"],
                                lineterminator="\n")
        writer.writeheader()
        for row in self.per_label:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        kv = dict(line.split(" = ", 1) for line in text.splitlines() if " = " in line)
        levels = {int(k[len("macro_f1_level"):]): float(v) for k, v in kv.items()
                  if k.startswith("macro_f1_level")}
        return cls(float(kv["micro_f1"]), float(kv["macro_f1"]), levels,
                   float(kv["inconsistency_rate"]), int(kv["n_samples"]),
                   float(kv.get("malformed_token_rate", 0.0)))


def score(gold, pred, h: LabelHierarchy, malformed_token_rate: float = 0.0) -> EvalReport:
    return EvalReport(
        micro_f1=micro_f1(gold, pred),
        macro_f1=macro_f1(gold, pred, h),
        per_level_macro_f1=per_level_macro_f1(gold, pred, h),
        inconsistency_rate=inconsistency_rate(pred, h),
        n_samples=len(gold),
        malformed_token_rate=malformed_token_rate,
        per_label=per_label_scores(gold, pred, h),
    )


def predict(ck: "Checkpoint", h: LabelHierarchy, texts: Sequence[str],
            max_len: int | None = None, jobs: int = 1,
            chunk: int = 128) -> tuple[list[set[str]], list[list[str]], float]:
    """Decode texts into label sets; returns ``(sets, raw token lists, malformed rate)``.

    ``jobs > 1`` decodes chunks on a thread pool; output order is unchanged.
    """
    vocab = ck.vocab
    srcs = [encode_text(vocab, t, ck.config.max_src_len) for t in texts]

    def run(part):
        return greedy_decode_batch(ck.params, ck.config, part, vocab.bos_id, vocab.eos_id,
                                   vocab.pad_id, max_len, batch_size=chunk)

    parts = [srcs[i:i + chunk] for i in range(0, len(srcs), chunk)]
    if jobs > 1 and len(parts) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outs = [o for res in pool.map(run, parts) for o in res]
    else:
        outs = [o for part in parts for o in run(part)]
    sets, raws = [], []
    malformed = emitted = 0
    for ids in outs:
        toks = vocab.decode_labels(ids)
        labels, diag = parse_sequence(h, toks, check_levels=not ck.flat_labels)
        malformed += diag.malformed_tokens
        emitted += sum(t not in SYMBOLS for t in toks)
        sets.append(labels)
        raws.append(toks)
    return sets, raws, (malformed / emitted if emitted else 0.0)


def evaluate_examples(ck: "Checkpoint", h: LabelHierarchy, examples: Sequence["Example"],
                      max_len: int | None = None, jobs: int = 1) -> EvalReport:
    if not examples:
        raise ValueError("empty evaluation set")
    pred, _, bad = predict(ck, h, [ex.text for ex in examples], max_len, jobs)
    return score([set(ex.labels) for ex in examples], pred, h, bad)


def export_attention(trace: M.ForwardTrace, tokens: Sequence[str], path: str | Path | None = None,
                     block: int = 0, head: int | None = None) -> np.ndarray:
    """Write one decoder self-attention map as CSV with token headers.

    ``head=None`` averages over heads. ``tokens`` label the decoder inputs; a
    missing BOS prefix is added. Returns the exported matrix.
    """
    scores = np.asarray(trace.self_scores[block])
    if scores.ndim == 4:
        if scores.shape[0] != 1:
            raise ValueError("export_attention expects a single-sample trace")
        scores = scores[0]
    mat = scores.mean(0) if head is None else scores[head]
    toks = list(tokens)
    if len(toks) == mat.shape[0] - 1:
        toks = [BOS] + toks
    if len(toks) != mat.shape[0]:
        raise ValueError(f"{len(toks)} tokens for a {mat.shape[0]}x{mat.shape[0]} score matrix")
    if path is not None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow([""] + toks)
            for tok, row in zip(toks, mat):
                writer.writerow([tok] + [repr(float(v)) for v in row])
    return mat
