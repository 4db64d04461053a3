"""
Where the decoder looks
=======================

Fit a model on a tiny corpus, then read one decoder self-attention map and
measure how much of it falls on the current label's path.
"""

import numpy as np

from pammhtc import ModelConfig, TrainConfig, Vocabulary, build_mask, train
from pammhtc import model as M
from pammhtc.datagen import SynthSpec, generate
from pammhtc.evalinfer import export_attention
from pammhtc.train import Example, make_batch, target_sequence

corpus = generate(SynthSpec(branching=(2, 2, 2), n_train=200, n_val=40, n_test=40, seed=4))
h = corpus.hierarchy
tr = [Example(r["text"], r["labels"]) for r in corpus.splits["train"]]
va = [Example(r["text"], r["labels"]) for r in corpus.splits["val"]]
vocab = Vocabulary.build(h, [e.text for e in tr])
cfg = ModelConfig(vocab_size=len(vocab), n_out=vocab.n_decoder, d_model=32, n_heads=4, d_ff=64)

ck = train(tr, va, h, vocab, cfg, TrainConfig(rho=100.0, lr=1e-3, epochs=8)).checkpoint

# the sample with the most labels makes the richest picture
ex = max(va, key=lambda e: len(e.labels))
seq = target_sequence(h, ex.labels)
batch = make_batch([ex], h, vocab, cfg)
trace = M.forward(ck.params, cfg, batch.src, batch.tgt_in, batch.src_mask, batch.tgt_mask)

att = export_attention(trace, seq.tokens, "attention_block0.csv")  # heads averaged
print(" ".join(seq.tokens))
np.set_printoptions(precision=2, suppress=True, linewidth=150)
print(att)

# share of each row's attention on its path (BOS row and column dropped)
mask = build_mask(h, seq)
print((att[1:, 1:] * mask.m).sum(1))
