import math

import numpy as np
import pytest

from pammhtc import model as M
from pammhtc.hierarchy import load_hierarchy
from pammhtc.labelseq import Vocabulary, bfs_flatten
from pammhtc.pamm import build_mask
from pammhtc.train import (AdamState, Example, TrainConfig, adam_step, backward, clip_grad_norm,
                           cross_entropy_loss, make_batch, pamm_loss, total_loss, train)

from conftest import WORKED_EDGES, WORKED_SEQ

TEXTS = ["alpha beta", "gamma delta alpha", "beta beta epsilon", "delta zeta"]
LABELS = [["l1", "l2"], ["l3", "l4"], ["l1", "l3", "l2", "l4", "l5"], ["l3"]]


@pytest.fixture
def setup():
    h = load_hierarchy(WORKED_EDGES)
    vocab = Vocabulary.build(h, TEXTS)
    cfg = M.ModelConfig(vocab_size=len(vocab), n_out=vocab.n_decoder, d_model=8, n_heads=2,
                        n_blocks=1, d_ff=12, max_src_len=10, max_tgt_len=12, dropout=0.0)
    exs = [Example(t, l) for t, l in zip(TEXTS, LABELS)]
    batch = make_batch(exs, h, vocab, cfg)
    return h, vocab, cfg, exs, batch


class TestCrossEntropy:
    def test_uniform_is_log_v(self):
        assert cross_entropy_loss(np.zeros((4, 7)), np.array([0, 3, 6, 2])) == pytest.approx(math.log(7), abs=1e-12)

    def test_large_margin_near_zero(self):
        logits = np.full((3, 5), -50.0)
        gold = np.array([1, 4, 0])
        logits[np.arange(3), gold] = 50.0
        assert cross_entropy_loss(logits, gold) < 1e-40

    def test_naive_oracle_with_padding(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(2, 4, 6))
        gold = rng.integers(0, 6, size=(2, 4))
        pad = np.array([[False, False, True, True], [False, False, False, False]])
        per = []
        for i in range(2):
            terms = []
            for t in range(4):
                if pad[i, t]:
                    continue
                z = sum(math.exp(x) for x in logits[i, t])
                terms.append(-(logits[i, t, gold[i, t]] - math.log(z)))
            per.append(sum(terms) / len(terms))
        assert cross_entropy_loss(logits, gold, pad) == pytest.approx(sum(per) / 2, abs=1e-10)

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            cross_entropy_loss(np.zeros((2, 3)), np.array([0, 3]))


class TestPammLoss:
    def test_on_path_is_zero(self, worked):
        pm = build_mask(worked, WORKED_SEQ)
        s = pm.m / pm.m.sum(1, keepdims=True)
        assert pamm_loss([np.stack([s, s])], pm) == pytest.approx(0.0, abs=1e-14)

    def test_single_position(self):
        assert pamm_loss([np.ones((1, 1, 1))], np.ones((1, 1))) == 0.0

    def test_loop_oracle(self, worked):
        pm = build_mask(worked, WORKED_SEQ)
        n = pm.n
        rng = np.random.default_rng(1)
        blocks = []
        for _ in range(2):
            raw = np.tril(rng.random((2, n, n))) + 1e-3 * np.tril(np.ones((n, n)))
            blocks.append(raw / raw.sum(-1, keepdims=True))
        expected = 0.0
        for s in blocks:
            for hd in range(2):
                for i in range(n):
                    on = sum(s[hd, i, j] for j in range(n) if pm.m[i, j])
                    expected += (1.0 - on) / 2
        assert pamm_loss(blocks, pm) == pytest.approx(expected, abs=1e-12)

    def test_more_off_path_mass_never_lowers_total(self, worked):
        pm = build_mask(worked, WORKED_SEQ)
        n = pm.n
        causal = np.tril(np.ones((n, n)))
        on = pm.m / pm.m.sum(1, keepdims=True)
        uni = causal / causal.sum(1, keepdims=True)
        prev = -1.0
        for a in np.linspace(0, 1, 6):
            s = (1 - a) * on + a * uni
            val = pamm_loss([s[None]], pm)
            assert val >= prev - 1e-12
            prev = val


class TestObjective:
    def test_rho_zero_is_ce(self, setup):
        _, _, cfg, _, batch = setup
        p = M.init_params(cfg, 0)
        out = total_loss(p, cfg, batch, TrainConfig(rho=0.0))
        assert out.total == out.loss_hia

    def test_rho_linearity(self, setup):
        _, _, cfg, _, batch = setup
        p = M.init_params(cfg, 0)
        a = total_loss(p, cfg, batch, TrainConfig(rho=1.0))
        b = total_loss(p, cfg, batch, TrainConfig(rho=100.0))
        assert a.loss_hia == b.loss_hia and a.loss_pamm == b.loss_pamm
        assert b.total - b.loss_hia == pytest.approx(100 * (a.total - a.loss_hia), rel=1e-12)

    def test_pamm_matches_per_sample_oracle(self, setup):
        h, _, cfg, exs, batch = setup
        p = M.init_params(cfg, 0)
        out = total_loss(p, cfg, batch, TrainConfig(rho=1.0))
        tr = M.forward(p, cfg, batch.src, batch.tgt_in, batch.src_mask, batch.tgt_mask)
        vals = []
        for i, ex in enumerate(exs):
            pm = build_mask(h, bfs_flatten(h, ex.labels))
            v = 0.0
            for s in tr.self_scores:
                sub = s[i, :, 1:pm.n + 1, 1:pm.n + 1]  # BOS row and column dropped
                v += (1.0 - (sub * pm.m).sum(-1)).sum() / cfg.n_heads
            vals.append(v)
        assert out.loss_pamm == pytest.approx(np.mean(vals), abs=1e-12)

    def test_rho_zero_gradients_are_ce_gradients(self, setup):
        _, _, cfg, _, batch = setup
        p = M.init_params(cfg, 2)
        g0, _ = backward(p, cfg, batch, TrainConfig(rho=0.0))
        # central differences of the CE term on a few output-head weights
        for idx in [(0, 1), (3, 5), (7, 2)]:
            eps = 1e-6
            q = {k: v.copy() for k, v in p.items()}
            q["out.W"][idx] += eps
            up = total_loss(q, cfg, batch, TrainConfig(rho=0.0)).loss_hia
            q["out.W"][idx] -= 2 * eps
            dn = total_loss(q, cfg, batch, TrainConfig(rho=0.0)).loss_hia
            assert g0["out.W"][idx] == pytest.approx((up - dn) / (2 * eps), rel=1e-6, abs=1e-9)

    def test_pad_embedding_gets_no_gradient(self, setup):
        _, vocab, cfg, _, batch = setup
        p = M.init_params(cfg, 0)
        g, _ = backward(p, cfg, batch, TrainConfig(rho=100.0))
        assert np.all(g["tok_emb"][vocab.pad_id] == 0.0)

    def test_non_finite_gradient_names_parameter(self, setup):
        _, _, cfg, _, batch = setup
        p = M.init_params(cfg, 0)
        p["out.b"][0] = np.nan
        with np.errstate(invalid="ignore"):
            with pytest.raises(FloatingPointError, match="out"):
                backward(p, cfg, batch, TrainConfig())


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = {"w": np.array([1.0, -2.0])}
        adam_step(p, {"w": np.zeros(2)}, AdamState(), lr=0.1)
        assert p["w"].tolist() == [1.0, -2.0]

    def test_moves_against_gradient(self):
        p = {"w": np.array([3.0])}
        st = AdamState()
        for _ in range(5):
            adam_step(p, {"w": 2 * p["w"]}, st, lr=0.1)
        assert 0 < p["w"][0] < 3.0

    def test_hand_stepped(self):
        lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
        w, m, v = 0.5, 0.0, 0.0
        grads = [0.3, -1.2, 0.7]
        p = {"w": np.array([w])}
        st = AdamState()
        for t, g in enumerate(grads, start=1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            w -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
            adam_step(p, {"w": np.array([g])}, st, lr, b1, b2, eps)
            assert p["w"][0] == pytest.approx(w, abs=1e-15)

    def test_clip(self):
        g = {"a": np.array([3.0]), "b": np.array([4.0])}
        assert clip_grad_norm(g, 1.0) == pytest.approx(5.0)
        assert math.hypot(g["a"][0], g["b"][0]) == pytest.approx(1.0)


class TestLoop:
    def test_deterministic_history_and_log(self, setup, tmp_path):
        h, vocab, cfg, exs, _ = setup
        tc = TrainConfig(epochs=2, batch_size=2, lr=1e-2, seed=5)
        a = train(exs, exs, h, vocab, cfg, tc, log_path=tmp_path / "a.jsonl")
        b = train(exs, exs, h, vocab, cfg, tc, log_path=tmp_path / "b.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
        assert len((tmp_path / "a.jsonl").read_text().splitlines()) == 2
        assert a.history == b.history
        for k in a.checkpoint.params:
            assert np.array_equal(a.checkpoint.params[k], b.checkpoint.params[k])

    def test_best_epoch_in_range(self, setup):
        h, vocab, cfg, exs, _ = setup
        res = train(exs, exs, h, vocab, cfg, TrainConfig(epochs=3, batch_size=4, lr=1e-2))
        assert 1 <= res.best_epoch <= 3
        assert res.checkpoint.meta["best_epoch"] == res.best_epoch

    def test_empty_corpus(self, setup):
        h, vocab, cfg, _, _ = setup
        with pytest.raises(ValueError, match="empty"):
            train([], [], h, vocab, cfg, TrainConfig())

    def test_vocab_mismatch(self, setup):
        h, vocab, cfg, exs, _ = setup
        bad = M.ModelConfig(**{**cfg.__dict__, "vocab_size": cfg.vocab_size + 1})
        with pytest.raises(ValueError, match="vocabulary"):
            train(exs, exs, h, vocab, bad, TrainConfig())

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            TrainConfig(rho=-1)
        with pytest.raises(ValueError):
            TrainConfig(pamm_rows="none")
