"""Multi-level label sequences and the shared token vocabulary.

A consistent label set is serialized breadth-first: level 1 labels first,
``_`` between labels of one level, ``/`` between levels, ``EOS`` at the end.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .hierarchy import HierarchyError, LabelHierarchy, orphans

INTRA = "_"
INTER = "/"
EOS = "EOS"
PAD = "<pad>"
BOS = "<bos>"
UNK = "<unk>"
SYMBOLS = (INTRA, INTER, EOS)
SPECIALS = (PAD, BOS, EOS, UNK, INTRA, INTER)

DEFAULT_MAX_SRC_LEN = 300


@dataclass(frozen=True)
class MultiLevelSequence:
    tokens: tuple[str, ...]
    levels: tuple[int, ...]
    kinds: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.tokens)

    def __iter__(self):
        return iter(self.tokens)

    def is_label(self, i: int) -> bool:
        return self.kinds[i] == "label"


def _finish(groups: list[list[str]], first_level: int = 1) -> MultiLevelSequence:
    tokens: list[str] = []
    levels: list[int] = []
    kinds: list[str] = []
    for g, group in enumerate(groups):
        level = first_level + g
        if g:
            tokens.append(INTER)
            levels.append(level - 1)
            kinds.append("symbol")
        for k, lab in enumerate(group):
            if k:
                tokens.append(INTRA)
                levels.append(level)
                kinds.append("symbol")
            tokens.append(lab)
            levels.append(level)
            kinds.append("label")
    tokens.append(EOS)
    levels.append(first_level + max(len(groups) - 1, 0))
    kinds.append("symbol")
    return MultiLevelSequence(tuple(tokens), tuple(levels), tuple(kinds))


def bfs_flatten(h: LabelHierarchy, labels: Iterable[str]) -> MultiLevelSequence:
    """Breadth-first serialization of a consistent label set.

    Within a level, labels follow their parents' order in the previous level,
    then sibling (file) order.
    """
    s = set(labels)
    unknown = sorted(lab for lab in s if lab not in h)
    if unknown:
        raise HierarchyError(f"unknown labels: {unknown}")
    missing = orphans(h, s)
    if missing:
        raise HierarchyError(
            f"inconsistent label set: parent of {missing[0]!r} ({h.parent[missing[0]]!r}) is missing")
    groups = []
    level = [r for r in h.roots if r in s]
    while level:
        groups.append(level)
        level = [c for lab in level for c in h.children(lab) if c in s]
    return _finish(groups)


def flat_sequence(h: LabelHierarchy, labels: Iterable[str]) -> MultiLevelSequence:
    """Unordered-set target for the no-hierarchy ablation: names sorted, ``_``-joined.

    Every label is reported at level 1; the hierarchy is only used to reject
    unknown labels.
    """
    s = sorted(set(labels))
    unknown = [lab for lab in s if lab not in h]
    if unknown:
        raise HierarchyError(f"unknown labels: {unknown}")
    return _finish([s] if s else [])


@dataclass
class Diagnostics:
    unknown_tokens: list[str] = field(default_factory=list)
    duplicate_labels: list[str] = field(default_factory=list)
    level_mismatches: list[tuple[str, int, int]] = field(default_factory=list)
    empty_groups: int = 0
    missing_eos: bool = False

    @property
    def clean(self) -> bool:
        return not (self.unknown_tokens or self.duplicate_labels or self.level_mismatches
                    or self.empty_groups or self.missing_eos)

    @property
    def malformed_tokens(self) -> int:
        return len(self.unknown_tokens) + len(self.duplicate_labels)


def parse_sequence(h: LabelHierarchy, tokens: Iterable[str],
                   check_levels: bool = True) -> tuple[set[str], Diagnostics]:
    """Recover a label set from arbitrary decoder output; never raises.

    Tokens after the first ``EOS`` are ignored. Level checks compare each
    label's ``/``-group index with its depth; disable them for flat targets.
    """
    diag = Diagnostics()
    found: set[str] = set()
    group = 1
    pending_label = False
    saw_eos = False
    for tok in tokens:
        if tok == EOS:
            saw_eos = True
            break
        if tok in (INTRA, INTER):
            if not pending_label:
                diag.empty_groups += 1
            pending_label = False
            if tok == INTER:
                group += 1
            continue
        pending_label = True
        if tok not in h:
            diag.unknown_tokens.append(tok)
            continue
        if tok in found:
            diag.duplicate_labels.append(tok)
            continue
        found.add(tok)
        if check_levels and h.depth[tok] != group:
            diag.level_mismatches.append((tok, group, h.depth[tok]))
    diag.missing_eos = not saw_eos
    return found, diag


class Vocabulary:
    """Bijective token/id map: specials, then labels, then lowercased words.

    Ids ``0 .. n_decoder-1`` cover everything the decoder may emit
    (specials and labels); word ids follow.
    """

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:len(SPECIALS)]) != SPECIALS:
            raise ValueError(f"vocabulary must start with {SPECIALS}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        self._itos = tokens
        self._stoi = {t: i for i, t in enumerate(tokens)}
        self.n_decoder = len(tokens)

    @classmethod
    def build(cls, h: LabelHierarchy, texts: Iterable[str] = ()) -> "Vocabulary":
        tokens = list(SPECIALS) + list(h.labels)
        words = sorted({w for text in texts for w in tokenize(text)})
        known = set(tokens)
        vocab = cls(tokens + [w for w in words if w not in known])
        vocab.n_decoder = len(SPECIALS) + len(h.labels)
        return vocab

    def __len__(self) -> int:
        return len(self._itos)

    def __contains__(self, token: object) -> bool:
        return token in self._stoi

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Vocabulary):
            return NotImplemented
        return self._itos == other._itos and self.n_decoder == other.n_decoder

    @property
    def tokens(self) -> list[str]:
        return list(self._itos)

    pad_id = property(lambda self: self._stoi[PAD])
    bos_id = property(lambda self: self._stoi[BOS])
    eos_id = property(lambda self: self._stoi[EOS])
    unk_id = property(lambda self: self._stoi[UNK])

    def id(self, token: str) -> int:
        return self._stoi.get(token, self.unk_id)

    def token(self, idx: int) -> str:
        return self._itos[idx]

    def encode_labels(self, seq: Iterable[str]) -> list[int]:
        ids = []
        for tok in seq:
            if tok not in self._stoi or self._stoi[tok] >= self.n_decoder:
                raise KeyError(f"token {tok!r} is not a decoder-side token")
            ids.append(self._stoi[tok])
        return ids

    def decode_labels(self, ids: Iterable[int]) -> list[str]:
        return [self._itos[i] for i in ids]

    def save(self, path: str | Path) -> None:
        lines = [f"{i}\t{t}" for i, t in enumerate(self._itos)]
        lines.insert(0, f"# n_decoder={self.n_decoder}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        tokens: list[str] = []
        n_decoder = None
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.startswith("# n_decoder="):
                n_decoder = int(line.split("=", 1)[1])
                continue
            if not line.strip():
                continue
            idx, tok = line.split("\t", 1)
            if int(idx) != len(tokens):
                raise ValueError(f"vocabulary ids must be contiguous, got {idx} at row {len(tokens)}")
            tokens.append(tok)
        vocab = cls(tokens)
        if n_decoder is not None:
            vocab.n_decoder = n_decoder
        return vocab


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def encode_text(vocab: Vocabulary, text: str | Sequence[str],
                max_len: int = DEFAULT_MAX_SRC_LEN) -> list[int]:
    """Whitespace tokens to ids, unknown words to UNK, truncated to ``max_len``.

    Empty input encodes as a single UNK so the encoder always has a key.
    """
    words = tokenize(text) if isinstance(text, str) else [w.lower() for w in text]
    ids = [vocab.id(w) for w in words[:max_len]]
    return ids or [vocab.unk_id]


def decode_text(vocab: Vocabulary, ids: Iterable[int]) -> list[str]:
    return [vocab.token(i) for i in ids]
