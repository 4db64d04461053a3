"""Path-adaptive mask matrices and the off-path attention mass they measure."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .hierarchy import LabelHierarchy
from .labelseq import SYMBOLS, MultiLevelSequence


@dataclass(frozen=True)
class PathAdaptiveMask:
    m: np.ndarray           # (n, n) uint8, lower triangular incl. diagonal
    label_rows: np.ndarray  # (n,) bool, True where the row token is a label

    @property
    def n(self) -> int:
        return self.m.shape[0]

    @property
    def path_index_sets(self) -> list[set[int]]:
        """0-based column sets ``C_i`` of every row."""
        return [set(np.flatnonzero(row).tolist()) for row in self.m]

    def to_text(self, tokens: Iterable[str] | None = None) -> str:
        rows = ["".join(str(int(v)) for v in row) for row in self.m]
        if tokens is None:
            return "\n".join(" ".join(r) for r in rows)
        toks = list(tokens)
        width = max(len(t) for t in toks)
        lines = [" " * width + " " + " ".join(t[0] for t in toks)]
        lines += [f"{t:>{width}} " + " ".join(r) for t, r in zip(toks, rows)]
        return "\n".join(lines)

    def to_csv(self, tokens: Iterable[str]) -> str:
        toks = list(tokens)
        out = ["," + ",".join(toks)]
        out += [t + "," + ",".join(str(int(v)) for v in row) for t, row in zip(toks, self.m)]
        return "\n".join(out) + "\n"


def _path_context(h: LabelHierarchy, tokens: list[str], i: int) -> list[int]:
    """Columns holding ancestors of label ``tokens[i]`` plus the separator right after each."""
    targets = set()
    node = tokens[i]
    while node in h.parent:
        node = h.parent[node]
        targets.add(node)
    cols = []
    for j in range(i):
        if tokens[j] in targets:
            cols.append(j)
            if j + 1 < i and tokens[j + 1] in SYMBOLS:
                cols.append(j + 1)
    return cols


def build_mask(h: LabelHierarchy, ml: MultiLevelSequence | Iterable[str]) -> PathAdaptiveMask:
    """Fill the mask row by row.

    A label row sees itself, its ancestors, and the separator that follows
    each ancestor. A symbol row sees itself, the previous token, and the
    previous token's path context.
    """
    tokens = list(ml.tokens if isinstance(ml, MultiLevelSequence) else ml)
    for tok in tokens:
        if tok not in SYMBOLS and tok not in h:
            raise KeyError(f"token {tok!r} is neither a label of the hierarchy nor a separator")
    n = len(tokens)
    m = np.zeros((n, n), dtype=np.uint8)
    is_label = np.array([tok not in SYMBOLS for tok in tokens], dtype=bool)
    for i in range(n):
        m[i, i] = 1
        if is_label[i]:
            m[i, _path_context(h, tokens, i)] = 1
        elif i > 0:
            m[i, i - 1] = 1
            if is_label[i - 1]:
                m[i, _path_context(h, tokens, i - 1)] = 1
    return PathAdaptiveMask(m, is_label)


def off_path_mass(score: np.ndarray, mask: PathAdaptiveMask | np.ndarray) -> np.ndarray:
    """Per-row ``1 - sum_{j in C_i} score[i, j]`` for row-normalised scores.

    Evaluated as the mass on the complement of ``C_i``, which equals the
    expression above when rows sum to one and cannot round below zero.
    ``score`` may carry leading batch/head axes; the last two must match the mask.
    """
    m = mask.m if isinstance(mask, PathAdaptiveMask) else np.asarray(mask)
    score = np.asarray(score)
    if score.shape[-2:] != m.shape:
        raise ValueError(f"score shape {score.shape[-2:]} does not match mask {m.shape}")
    return (score * (m == 0)).sum(axis=-1)
