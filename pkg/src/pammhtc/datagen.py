"""Synthetic hierarchies and text/label-path corpora with learnable signal.

Every label owns a small disjoint set of signal words. A sample picks one or
more root-to-leaf paths (optionally cut short), takes the union of the path
labels as gold, and emits a shuffled bag of those labels' signal words plus
noise words.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .hierarchy import VIRTUAL_ROOT, LabelHierarchy, load_hierarchy, write_hierarchy

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


@dataclass
class SynthSpec:
    levels: int = 3
    branching: tuple[int, ...] = (3, 3, 3)
    text_vocab_size: int = 600
    signal_words_per_label: int = 3
    # signal tokens emitted per gold label
    signal_tokens: int = 2
    # probability that a gold label emits no signal at all
    signal_dropout: float = 0.0
    noise_rate: float = 0.5
    min_paths: int = 1
    max_paths: int = 3
    multi_path_rate: float = 0.4
    truncate_rate: float = 0.0
    # Zipf exponent over sibling popularity; 0 gives uniform children
    zipf: float = 1.0
    # fraction of a label's signal tokens drawn from a pool shared with its
    # same-rank cousins (children at the same sibling position under other parents)
    cousin_share: float = 0.0
    n_train: int = 2000
    n_val: int = 400
    n_test: int = 400
    seed: int = 0

    def __post_init__(self):
        self.branching = tuple(int(b) for b in self.branching)
        if self.levels < 2:
            raise ValueError("levels must be >= 2")
        if len(self.branching) != self.levels or min(self.branching) < 1:
            raise ValueError(f"branching needs {self.levels} positive entries, got {self.branching}")
        if not 1 <= self.min_paths <= self.max_paths:
            raise ValueError("need 1 <= min_paths <= max_paths")
        for name in ("noise_rate", "multi_path_rate", "truncate_rate", "signal_dropout", "cousin_share"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.noise_rate >= 1.0:
            raise ValueError("noise_rate must be < 1")

    @property
    def n_labels(self) -> int:
        return int(sum(np.cumprod(self.branching)))


@dataclass
class SynthCorpus:
    hierarchy: LabelHierarchy
    splits: dict[str, list[dict]]
    signal_words: dict[str, list[str]] = field(default_factory=dict)

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"hierarchy": out / "hierarchy.tsv"}
        write_hierarchy(self.hierarchy, paths["hierarchy"])
        for name, records in self.splits.items():
            paths[name] = out / f"{name}.jsonl"
            write_corpus(records, paths[name])
        return paths


def _pseudo_words(rng: np.random.Generator, count: int, syllables: tuple[int, int]) -> list[str]:
    seen: set[str] = set()
    words: list[str] = []
    while len(words) < count:
        k = rng.integers(syllables[0], syllables[1] + 1)
        w = "".join(_CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
                    for _ in range(k))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def generate(spec: SynthSpec) -> SynthCorpus:
    """Build a hierarchy and train/val/test splits, deterministically from ``spec.seed``."""
    K = spec.n_labels
    n_cousin_pools = sum(spec.branching[1:])
    n_shared = n_cousin_pools * spec.signal_words_per_label if spec.cousin_share > 0 else 0
    needed = K * spec.signal_words_per_label + n_shared + 1
    if spec.text_vocab_size < needed:
        raise ValueError(f"text_vocab_size={spec.text_vocab_size} too small: "
                         f"{K} labels x {spec.signal_words_per_label} signal words need >= {needed}")
    rng = np.random.default_rng(spec.seed)

    names = [w.capitalize() for w in _pseudo_words(rng, K, (2, 3))]
    edges: list[tuple[str, str]] = []
    children: dict[str, list[str]] = {VIRTUAL_ROOT: []}
    rank: dict[str, int] = {}
    frontier = [VIRTUAL_ROOT]
    it = iter(names)
    for level in range(spec.levels):
        nxt = []
        for par in frontier:
            for r in range(spec.branching[level]):
                lab = next(it)
                edges.append((par, lab))
                children.setdefault(par, []).append(lab)
                children[lab] = []
                rank[lab] = r
                nxt.append(lab)
        frontier = nxt
    h = load_hierarchy("".join(f"{p}\t{c}\n" for p, c in edges))

    words = _pseudo_words(rng, spec.text_vocab_size, (2, 4))
    signal = {lab: words[i * spec.signal_words_per_label:(i + 1) * spec.signal_words_per_label]
              for i, lab in enumerate(h.labels)}
    pos = K * spec.signal_words_per_label
    cousin_pool: dict[tuple[int, int], list[str]] = {}
    if n_shared:
        for d in range(2, spec.levels + 1):
            for r in range(spec.branching[d - 1]):
                cousin_pool[(d, r)] = words[pos:pos + spec.signal_words_per_label]
                pos += spec.signal_words_per_label
    noise = words[pos:]

    # popularity of each child among its siblings
    weights: dict[str, np.ndarray] = {}
    for par, kids in children.items():
        if kids:
            w = 1.0 / (1.0 + rng.permutation(len(kids))) ** spec.zipf
            weights[par] = w / w.sum()

    def sample_path() -> list[str]:
        path = []
        node = VIRTUAL_ROOT
        while children.get(node):
            kids = children[node]
            node = kids[rng.choice(len(kids), p=weights[node])]
            path.append(node)
            if len(path) < spec.levels and rng.random() < spec.truncate_rate:
                break
        return path

    def sample() -> dict:
        k = 1
        if spec.max_paths > 1 and rng.random() < spec.multi_path_rate:
            k = int(rng.integers(max(spec.min_paths, 2), spec.max_paths + 1))
        elif spec.min_paths > 1:
            k = spec.min_paths
        gold: set[str] = set()
        paths: list[list[str]] = []
        for _ in range(50 * k):
            p = sample_path()
            if p not in paths:
                paths.append(p)
                gold.update(p)
            if len(paths) == k:
                break
        tokens: list[str] = []
        for lab in (lab for lab in h.labels if lab in gold):
            if rng.random() < spec.signal_dropout:
                continue
            for _ in range(spec.signal_tokens):
                d = h.depth[lab]
                if d > 1 and n_shared and rng.random() < spec.cousin_share:
                    pool = cousin_pool[(d, rank[lab])]
                else:
                    pool = signal[lab]
                tokens.append(pool[rng.integers(len(pool))])
        n_noise = int(round(len(tokens) * spec.noise_rate / (1.0 - spec.noise_rate)))
        tokens += [noise[i] for i in rng.integers(len(noise), size=n_noise)]
        if not tokens:
            tokens.append(noise[rng.integers(len(noise))])
        order = rng.permutation(len(tokens))
        labels = [lab for lab in h.labels if lab in gold]
        return {"text": " ".join(tokens[i] for i in order), "labels": labels}

    splits = {
        "train": [sample() for _ in range(spec.n_train)],
        "val": [sample() for _ in range(spec.n_val)],
        "test": [sample() for _ in range(spec.n_test)],
    }
    return SynthCorpus(h, splits, signal)


def write_corpus(records, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps({"text": rec["text"], "labels": list(rec["labels"])},
                                ensure_ascii=False) + "\n")


def read_corpus(path: str | Path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if not isinstance(rec.get("text"), str) or not isinstance(rec.get("labels"), list):
                raise ValueError(f"{path}:{lineno}: expected {{'text': str, 'labels': [str, ...]}}")
            out.append(rec)
    return out


def corpus_stats(h: LabelHierarchy, records: list[dict]) -> dict:
    """Label counts per level and label-set sizes, shaped like a dataset summary table."""
    sizes = [len(r["labels"]) for r in records]
    per_level = {lvl: 0 for lvl in range(1, h.n_levels + 1)}
    for r in records:
        for lab in r["labels"]:
            if lab in h:
                per_level[h.depth[lab]] += 1
    return {
        "samples": len(records),
        "avg_labels": float(np.mean(sizes)) if sizes else 0.0,
        "max_labels": max(sizes, default=0),
        "multi_path": sum(_n_leaves(h, r["labels"]) > 1 for r in records),
        "per_level": per_level,
    }


def _n_leaves(h: LabelHierarchy, labels) -> int:
    s = set(labels)
    return sum(1 for lab in s if lab in h and not any(c in s for c in h.children(lab)))


def spec_to_dict(spec: SynthSpec) -> dict:
    d = asdict(spec)
    d["branching"] = list(spec.branching)
    return d
