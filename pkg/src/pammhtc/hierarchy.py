"""Label hierarchy: a forest of rooted label trees loaded from an edge list.

The edge-list format is one ``parent<TAB>child`` pair per line. ``ROOT`` is a
virtual parent that marks top-level labels; it never becomes a label itself.
Blank lines and ``#`` comments are skipped. Sibling order is file order.
"""

from __future__ import annotations

from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping

VIRTUAL_ROOT = "ROOT"
RESERVED_SYMBOLS = ("_", "/", "EOS")


class HierarchyError(ValueError):
    """Malformed hierarchy file or an inconsistent label set."""


class LabelHierarchy:
    """Immutable label forest with parent/ancestor/depth queries.

    Build it with :func:`load_hierarchy` or :meth:`from_edges`; the
    constructor expects already-validated parent and children maps.
    """

    def __init__(self, labels: Iterable[str], parent: Mapping[str, str],
                 children: Mapping[str, Iterable[str]]):
        self._labels = tuple(labels)
        self._parent = MappingProxyType(dict(parent))
        self._children = MappingProxyType(
            {lab: tuple(children.get(lab, ())) for lab in self._labels})
        self._roots = tuple(lab for lab in self._labels if lab not in self._parent)
        depth: dict[str, int] = {}
        for root in self._roots:
            depth[root] = 1
            stack = [root]
            while stack:
                node = stack.pop()
                for child in self._children[node]:
                    depth[child] = depth[node] + 1
                    stack.append(child)
        self._depth = MappingProxyType(depth)
        self._index = MappingProxyType({lab: i for i, lab in enumerate(self._labels)})

    @classmethod
    def from_edges(cls, edges: Iterable[tuple[str, str]]) -> "LabelHierarchy":
        lines = "\n".join(f"{p}\t{c}" for p, c in edges)
        return load_hierarchy(lines)

    @property
    def labels(self) -> tuple[str, ...]:
        return self._labels

    @property
    def parent(self) -> Mapping[str, str]:
        return self._parent

    @property
    def roots(self) -> tuple[str, ...]:
        return self._roots

    @property
    def depth(self) -> Mapping[str, int]:
        return self._depth

    @property
    def n_levels(self) -> int:
        return max(self._depth.values(), default=0)

    def children(self, label: str) -> tuple[str, ...]:
        self._check(label)
        return self._children[label]

    def index(self, label: str) -> int:
        """Position of ``label`` in the canonical label order."""
        self._check(label)
        return self._index[label]

    def labels_at(self, level: int) -> list[str]:
        return [lab for lab in self._labels if self._depth[lab] == level]

    def __contains__(self, label: object) -> bool:
        return label in self._index

    def __len__(self) -> int:
        return len(self._labels)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LabelHierarchy):
            return NotImplemented
        return (self._labels == other._labels
                and dict(self._parent) == dict(other._parent)
                and dict(self._children) == dict(other._children))

    def __hash__(self) -> int:
        return hash((self._labels, tuple(sorted(self._parent.items()))))

    def __repr__(self) -> str:
        return f"LabelHierarchy({len(self._labels)} labels, {self.n_levels} levels)"

    def _check(self, label: str) -> None:
        if label not in self._index:
            raise KeyError(f"unknown label: {label!r}")

    def edges(self) -> list[tuple[str, str]]:
        """Edges in breadth-first order, with ``ROOT`` as parent of roots."""
        out = [(VIRTUAL_ROOT, r) for r in self._roots]
        queue = list(self._roots)
        for node in queue:
            for child in self._children[node]:
                out.append((node, child))
                queue.append(child)
        return out

    def to_text(self) -> str:
        return "".join(f"{p}\t{c}\n" for p, c in self.edges())


def _check_name(name: str, lineno: int) -> None:
    if not name:
        raise HierarchyError(f"line {lineno}: empty label name")
    if name == "EOS" or "_" in name or "/" in name:
        raise HierarchyError(
            f"line {lineno}: label {name!r} uses a reserved symbol {RESERVED_SYMBOLS}")
    if name.startswith("<") and name.endswith(">"):
        raise HierarchyError(f"line {lineno}: label {name!r} collides with special-token syntax")


def load_hierarchy(source: str) -> LabelHierarchy:
    """Parse edge-list text into a validated :class:`LabelHierarchy`."""
    order: list[str] = []
    seen: set[str] = set()
    parent: dict[str, str] = {}
    parent_line: dict[str, int] = {}
    children: dict[str, list[str]] = {}

    def touch(name: str) -> None:
        if name not in seen:
            seen.add(name)
            order.append(name)
            children[name] = []

    for lineno, raw in enumerate(source.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = [f.strip() for f in raw.rstrip("\r\n").split("\t")]
        fields = [f for f in fields if f]
        if len(fields) != 2:
            raise HierarchyError(f"line {lineno}: expected 'parent<TAB>child', got {raw!r}")
        par, child = fields
        if child == VIRTUAL_ROOT:
            raise HierarchyError(f"line {lineno}: {VIRTUAL_ROOT} may only appear as a parent")
        _check_name(child, lineno)
        if par != VIRTUAL_ROOT:
            _check_name(par, lineno)
        if par == child:
            raise HierarchyError(f"line {lineno}: cycle: {child!r} is its own parent")
        if child in parent_line:
            old = parent.get(child, VIRTUAL_ROOT)
            if old != par:
                raise HierarchyError(
                    f"line {lineno}: {child!r} already has parent {old!r} "
                    f"(line {parent_line[child]}), conflicting parent {par!r}")
            continue
        if par != VIRTUAL_ROOT:
            touch(par)
            parent[child] = par
        touch(child)
        parent_line[child] = lineno
        if par != VIRTUAL_ROOT:
            children[par].append(child)

    # every label must reach a root by walking parents
    status: dict[str, bool] = {}
    for lab in order:
        path = []
        node = lab
        while node in parent and node not in status:
            if node in path:
                raise HierarchyError(
                    f"line {parent_line[node]}: cycle detected through {node!r}")
            path.append(node)
            node = parent[node]
        for p in path:
            status[p] = True
        status.setdefault(node, True)

    return LabelHierarchy(order, parent, children)


def read_hierarchy(path: str | Path) -> LabelHierarchy:
    return load_hierarchy(Path(path).read_text(encoding="utf-8"))


def write_hierarchy(h: LabelHierarchy, path: str | Path) -> None:
    Path(path).write_text(h.to_text(), encoding="utf-8")


def ancestors(h: LabelHierarchy, label: str) -> list[str]:
    """Proper ancestors of ``label`` ordered from its root downward."""
    h._check(label)
    out = []
    node = label
    while node in h.parent:
        node = h.parent[node]
        out.append(node)
    out.reverse()
    return out


def is_consistent(h: LabelHierarchy, labels: Iterable[str]) -> bool:
    """True iff every member's parent is also a member (unknown labels ignored)."""
    s = set(labels)
    return all(h.parent[lab] in s for lab in s if lab in h and lab in h.parent)


def orphans(h: LabelHierarchy, labels: Iterable[str]) -> list[str]:
    """Members whose parent is missing, in canonical label order."""
    s = set(labels)
    return [lab for lab in h.labels if lab in s and lab in h.parent and h.parent[lab] not in s]


def induced_subtree(h: LabelHierarchy, labels: Iterable[str]) -> LabelHierarchy:
    """Restrict ``h`` to a consistent label set, keeping depths and sibling order."""
    s = set(labels)
    unknown = sorted(s.difference(h.labels))
    if unknown:
        raise HierarchyError(f"unknown labels: {unknown}")
    missing = orphans(h, s)
    if missing:
        raise HierarchyError(
            f"inconsistent label set: parent of {missing[0]!r} ({h.parent[missing[0]]!r}) is missing")
    keep = [lab for lab in h.labels if lab in s]
    parent = {lab: h.parent[lab] for lab in keep if lab in h.parent}
    children = {lab: [c for c in h.children(lab) if c in s] for lab in keep}
    return LabelHierarchy(keep, parent, children)
