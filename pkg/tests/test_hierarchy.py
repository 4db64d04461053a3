import numpy as np
import pytest

from pammhtc.hierarchy import (HierarchyError, ancestors, induced_subtree, is_consistent,
                               load_hierarchy, read_hierarchy, write_hierarchy)

from conftest import random_consistent_set, random_hierarchy


class TestLoad:
    def test_two_node_chain(self):
        h = load_hierarchy("ROOT\tA\nA\tB\n")
        assert h.depth["A"] == 1 and h.depth["B"] == 2
        assert h.roots == ("A",)
        assert "ROOT" not in h

    def test_worked_example_depths(self, worked):
        assert [worked.depth[l] for l in ("l1", "l3", "l2", "l4", "l5")] == [1, 1, 2, 2, 3]
        assert worked.roots == ("l1", "l3")

    def test_cycle(self):
        with pytest.raises(HierarchyError, match="cycle"):
            load_hierarchy("B\tA\nA\tB\n")

    def test_longer_cycle_reports_line(self):
        with pytest.raises(HierarchyError, match=r"line \d+: cycle"):
            load_hierarchy("ROOT\tX\nA\tB\nB\tC\nC\tA\n")

    def test_conflicting_parent(self):
        with pytest.raises(HierarchyError, match="line 3"):
            load_hierarchy("ROOT\tA\nROOT\tB\nB\tA\n")

    def test_repeated_edge_is_tolerated(self):
        h = load_hierarchy("ROOT\tA\nA\tB\nA\tB\n")
        assert h.children("A") == ("B",)

    @pytest.mark.parametrize("name", ["a_b", "x/y", "EOS"])
    def test_reserved_symbols(self, name):
        with pytest.raises(HierarchyError, match="line 2"):
            load_hierarchy(f"ROOT\tA\nA\t{name}\n")

    def test_root_only_as_parent(self):
        with pytest.raises(HierarchyError, match="ROOT"):
            load_hierarchy("A\tROOT\n")

    def test_comments_and_blank_lines(self):
        h = load_hierarchy("# taxonomy\n\nROOT\tA\n  \n# more\nA\tB\n")
        assert h.labels == ("A", "B")

    def test_malformed_line(self):
        with pytest.raises(HierarchyError, match="line 1"):
            load_hierarchy("ROOT A\n")

    def test_sibling_order_is_file_order(self):
        h = load_hierarchy("ROOT\tR\nR\tz\nR\ta\nR\tm\n")
        assert h.children("R") == ("z", "a", "m")

    def test_parent_without_root_line_is_root(self):
        h = load_hierarchy("A\tB\nROOT\tC\n")
        assert set(h.roots) == {"A", "C"}

    def test_file_round_trip(self, tmp_path, worked):
        write_hierarchy(worked, tmp_path / "h.tsv")
        assert read_hierarchy(tmp_path / "h.tsv") == worked


class TestAncestors:
    def test_root(self, worked):
        assert ancestors(worked, "l1") == []

    def test_chain(self):
        h = load_hierarchy("ROOT\tA\nA\tB\nB\tC\n")
        assert ancestors(h, "C") == ["A", "B"]

    def test_unknown(self, worked):
        with pytest.raises(KeyError):
            ancestors(worked, "nope")

    def test_random_trees_match_parent_walk(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            h = random_hierarchy(rng, max_levels=4)
            for lab in h.labels:
                walk = []
                node = lab
                while node in h.parent:
                    node = h.parent[node]
                    walk.append(node)
                assert ancestors(h, lab) == walk[::-1]
                assert h.depth[lab] == 1 + len(walk)


class TestSubtreeAndConsistency:
    def test_all_labels_is_identity(self, worked):
        assert induced_subtree(worked, worked.labels) == worked

    def test_single_root(self, worked):
        sub = induced_subtree(worked, {"l3"})
        assert sub.labels == ("l3",) and sub.depth["l3"] == 1

    def test_worked_partial_tree(self, worked):
        sub = induced_subtree(worked, {"l1", "l2", "l5", "l3"})
        assert sub.n_levels == 3
        assert sub.children("l1") == ("l2",) and sub.children("l3") == ()
        assert dict(sub.depth) == {"l1": 1, "l3": 1, "l2": 2, "l5": 3}

    def test_inconsistent_subset_rejected(self, worked):
        with pytest.raises(HierarchyError, match="l5"):
            induced_subtree(worked, {"l1", "l5"})

    def test_is_consistent_cases(self):
        h = load_hierarchy("ROOT\tA\nA\tB\n")
        assert is_consistent(h, {"A", "B"})
        assert not is_consistent(h, {"B"})
        assert is_consistent(h, set())

    def test_consistency_equals_ancestor_closure(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            h = random_hierarchy(rng)
            s = {lab for lab in h.labels if rng.random() < 0.5}
            closure = set(s)
            for lab in s:
                closure.update(ancestors(h, lab))
            assert is_consistent(h, s) == (closure == s)

    def test_random_subtrees_preserve_depth(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            h = random_hierarchy(rng)
            s = random_consistent_set(rng, h)
            sub = induced_subtree(h, s)
            assert set(sub.labels) == s
            assert all(sub.depth[l] == h.depth[l] for l in s)
