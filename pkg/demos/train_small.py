"""
Training on a synthetic hierarchy
=================================

Generate a small three-level corpus, train with and without the path
penalty, and compare test scores. Takes a minute or two on one core.
"""

from pammhtc import ModelConfig, TrainConfig, Vocabulary, train
from pammhtc.datagen import SynthSpec, corpus_stats, generate
from pammhtc.evalinfer import evaluate_examples
from pammhtc.train import Example

spec = SynthSpec(branching=(3, 2, 2), n_train=600, n_val=100, n_test=200, seed=0)
corpus = generate(spec)
h = corpus.hierarchy
print(len(h), "labels;", corpus_stats(h, corpus.splits["train"]))

def examples(split):
    return [Example(r["text"], r["labels"]) for r in corpus.splits[split]]

tr, va, te = examples("train"), examples("val"), examples("test")
print(tr[0])

vocab = Vocabulary.build(h, [e.text for e in tr])
cfg = ModelConfig(vocab_size=len(vocab), n_out=vocab.n_decoder, d_model=32, n_heads=4, d_ff=64)

for rho in (0.0, 100.0):
    res = train(tr, va, h, vocab, cfg, TrainConfig(rho=rho, lr=1e-3, epochs=15))
    for rec in res.history:
        print(rec)
    rep = evaluate_examples(res.checkpoint, h, te)
    print(f"rho={rho}: best epoch {res.best_epoch}")
    print(rep.to_text())
