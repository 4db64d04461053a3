import numpy as np
from hypothesis import given, settings, strategies as st

from pammhtc.hierarchy import HierarchyError, ancestors, load_hierarchy
from pammhtc.labelseq import (EOS, SPECIALS, Vocabulary, bfs_flatten, decode_text, encode_text,
                              flat_sequence, parse_sequence)

from conftest import WORKED_SEQ, random_consistent_set, random_hierarchy

import pytest


def level_sort_oracle(h, s):
    """Group by depth, order each level by (parent's index in previous level, sibling rank)."""
    levels = []
    depth = 1
    prev = [r for r in h.roots if r in s]
    while prev:
        levels.append(prev)
        depth += 1
        cands = [lab for lab in s if h.depth[lab] == depth]
        key = {lab: (prev.index(h.parent[lab]), h.children(h.parent[lab]).index(lab)) for lab in cands}
        prev = sorted(cands, key=key.get)
    return levels


class TestFlatten:
    def test_worked_example(self, worked):
        assert list(bfs_flatten(worked, {"l1", "l2", "l3", "l4", "l5"}).tokens) == WORKED_SEQ

    def test_single_root(self):
        h = load_hierarchy("ROOT\tA\nA\tB\n")
        assert list(bfs_flatten(h, {"A"}).tokens) == ["A", EOS]

    def test_empty_set(self, worked):
        assert list(bfs_flatten(worked, set()).tokens) == [EOS]

    def test_inconsistent(self, worked):
        with pytest.raises(HierarchyError, match="l2"):
            bfs_flatten(worked, {"l2"})

    def test_levels_and_kinds(self, worked):
        ml = bfs_flatten(worked, set(worked.labels))
        assert ml.levels == (1, 1, 1, 1, 2, 2, 2, 2, 3, 3)
        assert ml.kinds[:3] == ("label", "symbol", "label")

    def test_random_sets_against_level_sort_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            h = random_hierarchy(rng)
            s = random_consistent_set(rng, h)
            ml = bfs_flatten(h, s)
            toks = list(ml.tokens)
            groups = [[]]
            for t in toks[:-1]:
                if t == "/":
                    groups.append([])
                elif t != "_":
                    groups[-1].append(t)
            if not s:
                groups = []
            assert groups == level_sort_oracle(h, s)
            pos = {t: i for i, t in enumerate(toks)}
            for lab in s:
                assert all(pos[a] < pos[lab] for a in ancestors(h, lab))
            n_levels = len(groups)
            assert toks.count("/") == max(n_levels - 1, 0)
            assert toks.count("_") == len(s) - n_levels
            assert toks.count(EOS) == 1 and toks[-1] == EOS
            assert list(ml.levels) == sorted(ml.levels)

    def test_deterministic(self, worked):
        s = {"l1", "l2", "l3"}
        assert bfs_flatten(worked, s) == bfs_flatten(worked, set(sorted(s, reverse=True)))

    def test_flat_sequence_sorted_names(self, worked):
        assert list(flat_sequence(worked, {"l5", "l1", "l2"}).tokens) == ["l1", "_", "l2", "_", "l5", EOS]


class TestParse:
    def test_round_trip_worked(self, worked):
        labels, diag = parse_sequence(worked, WORKED_SEQ)
        assert labels == {"l1", "l2", "l3", "l4", "l5"} and diag.clean

    def test_level_mismatch(self):
        h = load_hierarchy("ROOT\tA\nA\tB\nB\tC\n")
        labels, diag = parse_sequence(h, ["A", "/", "C", EOS])
        assert labels == {"A", "C"}
        assert diag.level_mismatches == [("C", 2, 3)]

    def test_empty(self, worked):
        labels, diag = parse_sequence(worked, [])
        assert labels == set() and diag.missing_eos

    def test_unknown_and_duplicate(self, worked):
        labels, diag = parse_sequence(worked, ["l1", "_", "zz", "_", "l1", EOS, "l3"])
        assert labels == {"l1"}
        assert diag.unknown_tokens == ["zz"] and diag.duplicate_labels == ["l1"]
        assert diag.malformed_tokens == 2

    def test_empty_groups_counted(self, worked):
        _, diag = parse_sequence(worked, ["l1", "/", "/", "l5", EOS])
        assert diag.empty_groups == 1

    @settings(max_examples=150, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_round_trip_property(self, seed):
        rng = np.random.default_rng(seed)
        h = random_hierarchy(rng)
        s = random_consistent_set(rng, h)
        labels, diag = parse_sequence(h, bfs_flatten(h, s).tokens)
        assert labels == s and diag.clean


class TestVocabulary:
    @pytest.fixture
    def vocab(self, worked):
        return Vocabulary.build(worked, ["the cat sat", "The dog"])

    def test_layout(self, vocab, worked):
        assert vocab.tokens[:len(SPECIALS)] == list(SPECIALS)
        assert vocab.n_decoder == len(SPECIALS) + len(worked)
        assert len({vocab.pad_id, vocab.bos_id, vocab.eos_id, vocab.unk_id}) == 4

    def test_encode_decode_identity(self, vocab):
        ids = encode_text(vocab, "the cat sat")
        assert decode_text(vocab, ids) == ["the", "cat", "sat"]

    def test_unknown_word(self, vocab):
        assert encode_text(vocab, "the zebra") == [vocab.id("the"), vocab.unk_id]

    def test_truncation_default_300(self, vocab):
        assert len(encode_text(vocab, " ".join(["cat"] * 400))) == 300

    def test_empty_text_is_unk(self, vocab):
        assert encode_text(vocab, "") == [vocab.unk_id]

    def test_label_codec(self, vocab):
        ids = vocab.encode_labels(WORKED_SEQ)
        assert vocab.decode_labels(ids) == WORKED_SEQ
        assert max(ids) < vocab.n_decoder
        with pytest.raises(KeyError):
            vocab.encode_labels(["cat"])

    def test_save_load_stable(self, vocab, tmp_path):
        vocab.save(tmp_path / "v.tsv")
        again = Vocabulary.load(tmp_path / "v.tsv")
        assert again == vocab
        assert (again.pad_id, again.bos_id, again.eos_id) == (vocab.pad_id, vocab.bos_id, vocab.eos_id)
        first = (tmp_path / "v.tsv").read_text().splitlines()[1]
        assert first == "0\t<pad>"
