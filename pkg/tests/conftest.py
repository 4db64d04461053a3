import numpy as np
import pytest

from pammhtc.hierarchy import VIRTUAL_ROOT, load_hierarchy

WORKED_EDGES = "ROOT\tl1\nROOT\tl3\nl1\tl2\nl3\tl4\nl2\tl5\n"
WORKED_SEQ = ["l1", "_", "l3", "/", "l2", "_", "l4", "/", "l5", "EOS"]

ACCEPTANCE_RESULTS = []


@pytest.fixture
def worked():
    return load_hierarchy(WORKED_EDGES)


def random_hierarchy(rng, max_levels=4, max_labels=12):
    """Random forest with at most ``max_levels`` levels and ``max_labels`` labels."""
    n = int(rng.integers(1, max_labels + 1))
    names = [f"n{i}" for i in range(n)]
    depth = {}
    lines = []
    for i, name in enumerate(names):
        candidates = [m for m in names[:i] if depth[m] < max_levels]
        if not candidates or rng.random() < 0.25:
            lines.append(f"{VIRTUAL_ROOT}\t{name}")
            depth[name] = 1
        else:
            par = candidates[int(rng.integers(len(candidates)))]
            lines.append(f"{par}\t{name}")
            depth[name] = depth[par] + 1
    return load_hierarchy("\n".join(lines))


def random_consistent_set(rng, h):
    """Pick random labels and close them under ancestors."""
    picked = [lab for lab in h.labels if rng.random() < 0.4]
    out = set()
    for lab in picked:
        node = lab
        out.add(node)
        while node in h.parent:
            node = h.parent[node]
            out.add(node)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)
