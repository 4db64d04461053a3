"""Losses, gradients, Adam and the teacher-forced training loop.

The forward pass always uses plain causal attention. The path-adaptive mask
only enters the objective: ``total = loss_hia + rho * loss_pamm``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import model as M
from .hierarchy import LabelHierarchy
from .labelseq import Vocabulary, bfs_flatten, encode_text, flat_sequence
from .pamm import build_mask, off_path_mass

log = logging.getLogger(__name__)

PAMM_ROWS = ("all", "labels")


@dataclass
class Example:
    text: str
    labels: list[str]


@dataclass
class TrainConfig:
    rho: float = 100.0
    lr: float = 3e-4
    batch_size: int = 10
    epochs: int = 3
    seed: int = 0
    clip_norm: float | None = 1.0
    pamm_rows: str = "all"
    # "sample": rho scales each sample's PAMM sum, then the batch mean is taken
    # "batch": rho scales the batch sum
    pamm_reduction: str = "sample"
    flat_labels: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.rho < 0:
            raise ValueError("rho must be >= 0")
        if self.pamm_rows not in PAMM_ROWS:
            raise ValueError(f"pamm_rows must be one of {PAMM_ROWS}")
        if self.pamm_reduction not in ("sample", "batch"):
            raise ValueError("pamm_reduction must be 'sample' or 'batch'")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class LossBreakdown:
    loss_hia: float
    loss_pamm: float
    rho: float
    total: float

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class Batch:
    src: np.ndarray          # (N, S) int
    src_mask: np.ndarray     # (N, S) bool
    tgt_in: np.ndarray       # (N, n+1) BOS + sequence, PAD-filled
    tgt_out: np.ndarray      # (N, n+1) sequence + PAD
    tgt_mask: np.ndarray     # (N, n+1) bool, non-PAD decoder inputs
    path_mask: np.ndarray    # (N, n, n) float, path mask over sequence positions
    seq_rows: np.ndarray     # (N, n) bool, real sequence rows
    label_rows: np.ndarray   # (N, n) bool

    @property
    def size(self) -> int:
        return self.src.shape[0]


def target_sequence(h: LabelHierarchy, labels, flat: bool = False):
    return flat_sequence(h, labels) if flat else bfs_flatten(h, labels)


@dataclass
class EncodedExample:
    src: list[int]
    tgt: list[int]
    mask: np.ndarray
    label_rows: np.ndarray


def encode_example(ex: Example, h: LabelHierarchy, vocab: Vocabulary, cfg: M.ModelConfig,
                   flat: bool = False) -> EncodedExample:
    seq = target_sequence(h, ex.labels, flat)
    if len(seq) > cfg.max_tgt_len:
        raise ValueError(f"label sequence of length {len(seq)} exceeds max_tgt_len={cfg.max_tgt_len}")
    pm = build_mask(h, seq)
    return EncodedExample(encode_text(vocab, ex.text, cfg.max_src_len),
                          vocab.encode_labels(seq.tokens), pm.m, pm.label_rows)


def collate(items: Sequence[EncodedExample], vocab: Vocabulary) -> Batch:
    N = len(items)
    S = max(len(it.src) for it in items)
    n = max(len(it.tgt) for it in items)
    batch = Batch(
        src=np.full((N, S), vocab.pad_id, dtype=np.int64),
        src_mask=np.zeros((N, S), dtype=bool),
        tgt_in=np.full((N, n + 1), vocab.pad_id, dtype=np.int64),
        tgt_out=np.full((N, n + 1), vocab.pad_id, dtype=np.int64),
        tgt_mask=np.zeros((N, n + 1), dtype=bool),
        path_mask=np.zeros((N, n, n)),
        seq_rows=np.zeros((N, n), dtype=bool),
        label_rows=np.zeros((N, n), dtype=bool),
    )
    for i, it in enumerate(items):
        k = len(it.tgt)
        batch.src[i, :len(it.src)] = it.src
        batch.src_mask[i, :len(it.src)] = True
        batch.tgt_in[i, 0] = vocab.bos_id
        batch.tgt_in[i, 1:k + 1] = it.tgt
        batch.tgt_out[i, :k] = it.tgt
        batch.tgt_mask[i, :k + 1] = True
        batch.path_mask[i, :k, :k] = it.mask
        batch.seq_rows[i, :k] = True
        batch.label_rows[i, :k] = it.label_rows
    return batch


def make_batch(examples: Sequence[Example], h: LabelHierarchy, vocab: Vocabulary,
               cfg: M.ModelConfig, flat: bool = False) -> Batch:
    return collate([encode_example(ex, h, vocab, cfg, flat) for ex in examples], vocab)


# ---------------------------------------------------------------- losses

def _ce_terms(logits, gold, valid):
    """Per-sample mean CE over valid positions and its gradient wrt logits."""
    logp = M.log_softmax(logits)
    nll = -np.take_along_axis(logp, gold[..., None], axis=-1)[..., 0]
    counts = valid.sum(-1)
    per_sample = (nll * valid).sum(-1) / counts
    grad = np.exp(logp)
    np.put_along_axis(grad, gold[..., None], np.take_along_axis(grad, gold[..., None], -1) - 1.0, axis=-1)
    grad *= (valid / counts[..., None])[..., None]
    return per_sample, grad


def cross_entropy_loss(logits, gold, pad_mask=None) -> float:
    """Mean over samples of the mean token NLL over non-PAD positions.

    ``logits`` is ``(n, V)`` or ``(N, n, V)``; ``pad_mask`` marks PAD
    positions (True = ignore).
    """
    logits = np.asarray(logits, dtype=M.DTYPE)
    gold = np.asarray(gold)
    if gold.min() < 0 or gold.max() >= logits.shape[-1]:
        raise IndexError("gold id out of range")
    valid = np.ones(gold.shape, dtype=bool) if pad_mask is None else ~np.asarray(pad_mask, dtype=bool)
    per_sample, _ = _ce_terms(logits, gold, valid)
    return float(np.mean(per_sample))


def _pamm_rows(batch: Batch, rows: str) -> np.ndarray:
    return batch.seq_rows & batch.label_rows if rows == "labels" else batch.seq_rows


def pamm_loss(scores, mask, rows: np.ndarray | None = None) -> float:
    """Block-summed, head-averaged, timestep-summed off-path attention mass.

    ``scores`` is a sequence over blocks of ``(H, n, n)`` arrays aligned with
    the mask; ``rows`` optionally restricts which timesteps are summed.
    """
    total = 0.0
    for s in scores:
        s = np.asarray(s)
        if s.ndim != 3:
            raise ValueError(f"expected (H, n, n) scores per block, got {s.shape}")
        off = off_path_mass(s, mask)
        if rows is not None:
            off = off * rows
        total += off.sum() / s.shape[0]
    return float(total)


def _pamm_terms(self_scores, batch: Batch, rows: str):
    """Per-sample PAMM values and d(per-sample value)/d(score) per block.

    Decoder scores are BOS-prefixed; the BOS row is dropped and mass on the
    BOS column counts as off-path.
    """
    w = _pamm_rows(batch, rows).astype(M.DTYPE)
    per_sample = np.zeros(batch.size, dtype=self_scores[0].dtype if self_scores else M.DTYPE)
    grads = []
    for s in self_scores:
        H = s.shape[1]
        # mass outside the path, BOS column included
        off_cols = 1.0 - batch.path_mask
        off = s[:, :, 1:, 0] + (s[:, :, 1:, 1:] * off_cols[:, None]).sum(-1)
        per_sample += (off * w[:, None]).sum((1, 2)) / H
        g = np.zeros_like(s)
        g[:, :, 1:, 0] = w[:, None, :] / H
        g[:, :, 1:, 1:] = off_cols[:, None] * w[:, None, :, None] / H
        grads.append(g)
    return per_sample, grads


def _objective(params, cfg, batch: Batch, tcfg: TrainConfig, rng=None, need_grads=True):
    trace = M.forward(params, cfg, batch.src, batch.tgt_in, batch.src_mask, batch.tgt_mask,
                      rng=rng, keep_cache=need_grads)
    N = batch.size
    ce, dlogits = _ce_terms(trace.logits, batch.tgt_out, _out_valid(batch))
    pm, dscores = _pamm_terms(trace.self_scores, batch, tcfg.pamm_rows)
    # numpy scalars keep the parameter precision
    loss_hia = ce.mean()
    if tcfg.pamm_reduction == "sample":
        loss_pamm = pm.mean()
        pamm_scale = tcfg.rho / N
    else:
        loss_pamm = pm.sum()
        pamm_scale = tcfg.rho
    out = LossBreakdown(loss_hia, loss_pamm, tcfg.rho, loss_hia + tcfg.rho * loss_pamm)
    if not need_grads:
        return out, None, trace
    dlogits /= N
    if tcfg.rho:
        dscores = [g * pamm_scale for g in dscores]
    else:
        dscores = None
    grads = M.backward(params, cfg, trace, dlogits, dscores)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    return out, grads, trace


def _out_valid(batch: Batch) -> np.ndarray:
    valid = np.zeros(batch.tgt_out.shape, dtype=bool)
    valid[:, :-1] = batch.seq_rows
    return valid


def total_loss(params, cfg: M.ModelConfig, batch: Batch, tcfg: TrainConfig) -> LossBreakdown:
    """Loss components with dropout disabled."""
    out, _, _ = _objective(params, cfg, batch, tcfg, rng=None, need_grads=False)
    return out


def backward(params, cfg: M.ModelConfig, batch: Batch, tcfg: TrainConfig,
             rng=None) -> tuple[dict[str, np.ndarray], LossBreakdown]:
    """Exact gradients of the total loss for every parameter."""
    out, grads, _ = _objective(params, cfg, batch, tcfg, rng=rng, need_grads=True)
    return grads, out


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> float:
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """In-place bias-corrected Adam update of ``params``."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        params[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state


# ---------------------------------------------------------------- loop

@dataclass
class Checkpoint:
    """Model plus everything needed to decode with it."""
    config: M.ModelConfig
    params: dict[str, np.ndarray]
    vocab: Vocabulary
    flat_labels: bool = False
    meta: dict = field(default_factory=dict)

    def save(self, path) -> None:
        meta = dict(self.meta, flat_labels=self.flat_labels)
        M.save_checkpoint(path, self.config, self.params, self.vocab.tokens,
                          self.vocab.n_decoder, meta)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        cfg, params, header = M.load_checkpoint(path)
        vocab = Vocabulary(header["vocab"])
        vocab.n_decoder = header["n_decoder"]
        meta = header.get("meta", {})
        return cls(cfg, params, vocab, bool(meta.get("flat_labels", False)), meta)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict]
    best_epoch: int


def _fmt(x: float) -> float:
    return float(f"{x:.10g}")


def train(train_set: Sequence[Example], val_set: Sequence[Example], h: LabelHierarchy,
          vocab: Vocabulary, model_cfg: M.ModelConfig, tcfg: TrainConfig,
          log_path: str | Path | None = None, checkpoint_path: str | Path | None = None,
          init: Checkpoint | None = None, select_on: str = "mean_f1", jobs: int = 1) -> TrainResult:
    """Teacher-forced training with best-on-validation checkpoint selection.

    One JSON record per epoch goes to ``log_path``. ``select_on`` is one of
    ``micro_f1``, ``macro_f1`` or ``mean_f1``.
    """
    from .evalinfer import evaluate_examples

    if not train_set:
        raise ValueError("empty training corpus")
    if model_cfg.vocab_size != len(vocab) or model_cfg.n_out != vocab.n_decoder:
        raise ValueError("model config does not match vocabulary size")
    if init is not None:
        if init.vocab != vocab:
            raise ValueError("vocabulary does not match the initial checkpoint")
        params = {k: v.copy() for k, v in init.params.items()}
    else:
        params = M.init_params(model_cfg, tcfg.seed)
    seeds = np.random.SeedSequence(tcfg.seed).spawn(2)
    order_rng = np.random.default_rng(seeds[0])
    drop_rng = np.random.default_rng(seeds[1])
    encoded = [encode_example(ex, h, vocab, model_cfg, tcfg.flat_labels) for ex in train_set]
    state = AdamState()
    history: list[dict] = []
    best_score, best_epoch = -np.inf, 0
    best_params = {k: v.copy() for k, v in params.items()}
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, tcfg.epochs + 1):
            perm = order_rng.permutation(len(train_set))
            sums = np.zeros(3)
            n_batches = 0
            for start in range(0, len(perm), tcfg.batch_size):
                idx = perm[start:start + tcfg.batch_size]
                batch = collate([encoded[i] for i in idx], vocab)
                grads, parts = backward(params, model_cfg, batch, tcfg, rng=drop_rng)
                clip_grad_norm(grads, tcfg.clip_norm)
                adam_step(params, grads, state, tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.eps)
                sums += (parts.loss_hia, parts.loss_pamm, parts.total)
                n_batches += 1
            sums /= max(n_batches, 1)
            record = {"epoch": epoch, "loss_hia": _fmt(sums[0]), "loss_pamm": _fmt(sums[1]),
                      "rho": tcfg.rho, "loss": _fmt(sums[2])}
            ck = Checkpoint(model_cfg, params, vocab, tcfg.flat_labels)
            if val_set:
                report = evaluate_examples(ck, h, val_set, jobs=jobs)
                record.update(val_micro_f1=_fmt(report.micro_f1), val_macro_f1=_fmt(report.macro_f1),
                              val_inconsistency=_fmt(report.inconsistency_rate))
                score = {"micro_f1": report.micro_f1, "macro_f1": report.macro_f1,
                         "mean_f1": 0.5 * (report.micro_f1 + report.macro_f1)}[select_on]
            else:
                score = -sums[2]
            if score > best_score:
                best_score, best_epoch = score, epoch
                best_params = {k: v.copy() for k, v in params.items()}
            record["best_epoch"] = best_epoch
            history.append(record)
            log.info("epoch %d %s", epoch, record)
            if log_fh:
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
                log_fh.flush()
    finally:
        if log_fh:
            log_fh.close()
    meta = {"best_epoch": best_epoch, "train": asdict(tcfg)}
    best = Checkpoint(model_cfg, best_params, vocab, tcfg.flat_labels, meta)
    if checkpoint_path:
        best.save(checkpoint_path)
    return TrainResult(best, history, best_epoch)
