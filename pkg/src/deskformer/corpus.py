"""Synthetic PCFG corpora with word-level gold trees and the two pretraining tasks.

Word trees come from the constituency derivation by head percolation: the
head of every constituent is the head of its leftmost child, and the heads
of the remaining children attach to it. The head of the start symbol is the
root (parent ``-1``).
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .rng import stream

VOCAB_CAP = 64
LENGTH_CAP = 16
MAX_RETRIES = 1000


class GrammarError(ValueError):
    pass


class TreeError(ValueError):
    pass


@dataclass
class Production:
    lhs: str
    rhs: tuple[str, ...]
    p: float


@dataclass
class Topic:
    name: str
    boost: float
    terminals: frozenset[str]


@dataclass
class Grammar:
    nonterminals: list[str]
    terminals: list[str]
    productions: list[Production]
    start: str
    max_depth: int = 12
    max_len: int = LENGTH_CAP
    topics: list[Topic] = field(default_factory=list)

    def __post_init__(self):
        self.validate()
        self._by_lhs: dict[str, list[int]] = {}
        for i, prod in enumerate(self.productions):
            self._by_lhs.setdefault(prod.lhs, []).append(i)
        self.term_id = {t: i for i, t in enumerate(self.terminals)}

    def validate(self) -> None:
        if self.start not in self.nonterminals:
            raise GrammarError(f"start symbol {self.start!r} is not a nonterminal")
        if len(set(self.terminals)) != len(self.terminals):
            raise GrammarError("duplicate terminals")
        if len(self.terminals) > VOCAB_CAP:
            raise GrammarError(f"{len(self.terminals)} terminals exceed the cap of {VOCAB_CAP}")
        if set(self.terminals) & set(self.nonterminals):
            raise GrammarError("a symbol is both terminal and nonterminal")
        known = set(self.terminals) | set(self.nonterminals)
        totals: dict[str, float] = {nt: 0.0 for nt in self.nonterminals}
        for prod in self.productions:
            if prod.lhs not in totals:
                raise GrammarError(f"production for unknown nonterminal {prod.lhs!r}")
            if not prod.rhs:
                raise GrammarError(f"empty right-hand side for {prod.lhs!r}")
            for sym in prod.rhs:
                if sym not in known:
                    raise GrammarError(f"unknown symbol {sym!r}")
            if prod.p < 0:
                raise GrammarError("negative production probability")
            totals[prod.lhs] += prod.p
        for nt, total in totals.items():
            if abs(total - 1.0) > 1e-9:
                raise GrammarError(f"probabilities for {nt!r} sum to {total}")
        for topic in self.topics:
            if topic.boost <= 0 or not topic.terminals <= set(self.terminals):
                raise GrammarError(f"bad topic {topic.name!r}")

    @property
    def vocab_size(self) -> int:
        return len(self.terminals)

    def rule_probs(self, lhs: str, topic: int | None = None) -> tuple[list[int], np.ndarray]:
        idx = self._by_lhs[lhs]
        probs = np.array([self.productions[i].p for i in idx])
        if topic is not None and self.topics:
            t = self.topics[topic]
            boost = np.array([
                t.boost if any(s in t.terminals for s in self.productions[i].rhs) else 1.0
                for i in idx
            ])
            probs = probs * boost
            probs = probs / probs.sum()
        return idx, probs

    @classmethod
    def from_dict(cls, d: dict) -> "Grammar":
        return cls(
            nonterminals=list(d["nonterminals"]),
            terminals=list(d["terminals"]),
            productions=[Production(p["lhs"], tuple(p["rhs"]), float(p["p"])) for p in d["productions"]],
            start=d["start"],
            max_depth=int(d.get("max_depth", 12)),
            max_len=int(d.get("max_len", LENGTH_CAP)),
            topics=[Topic(t["name"], float(t["boost"]), frozenset(t["terminals"])) for t in d.get("topics", [])],
        )

    def to_dict(self) -> dict:
        return {
            "nonterminals": self.nonterminals,
            "terminals": self.terminals,
            "productions": [{"lhs": p.lhs, "rhs": list(p.rhs), "p": p.p} for p in self.productions],
            "start": self.start,
            "max_depth": self.max_depth,
            "max_len": self.max_len,
            "topics": [{"name": t.name, "boost": t.boost, "terminals": sorted(t.terminals)} for t in self.topics],
        }

    def with_topic_boost(self, boost: float) -> "Grammar":
        """Copy with every topic's boost replaced (1.0 makes topics inert)."""
        d = self.to_dict()
        for t in d["topics"]:
            t["boost"] = boost
        return Grammar.from_dict(d)

    @classmethod
    def load(cls, path) -> "Grammar":
        return cls.from_dict(json.loads(Path(path).read_text()))


def default_grammar() -> Grammar:
    text = resources.files("deskformer").joinpath("data/default_grammar.json").read_text()
    return Grammar.from_dict(json.loads(text))


@dataclass
class Sentence:
    id: int
    tokens: list[int]
    parents: list[int]
    doc: int = 0

    def __len__(self) -> int:
        return len(self.tokens)

    def to_record(self) -> dict:
        return {"id": self.id, "tokens": self.tokens, "parents": self.parents, "doc": self.doc}


@dataclass
class MaskedExample:
    sentence_id: int
    inputs: list[int]
    targets: list[int]
    positions: list[int]


@dataclass
class ContinuationPair:
    a: list[int]
    b: list[int]
    label: int  # 1 continuation, 0 unrelated
    a_id: int = -1
    b_id: int = -1


class _TooDeep(Exception):
    pass


def _derive(grammar: Grammar, rng: np.random.Generator, topic: int | None,
            rule_counts: dict[int, int] | None):
    """Sample one sentence; returns (words, parents)."""
    words: list[int] = []
    parents: list[int] = []

    def expand(symbol: str, depth: int) -> int:
        if symbol in grammar.term_id:
            words.append(grammar.term_id[symbol])
            parents.append(-1)
            if len(words) > grammar.max_len:
                raise _TooDeep
            return len(words) - 1
        if depth > grammar.max_depth:
            raise _TooDeep
        idx, probs = grammar.rule_probs(symbol, topic)
        choice = idx[int(rng.choice(len(idx), p=probs))]
        if rule_counts is not None:
            rule_counts[choice] = rule_counts.get(choice, 0) + 1
        heads = [expand(sym, depth + 1) for sym in grammar.productions[choice].rhs]
        for h in heads[1:]:
            parents[h] = heads[0]
        return heads[0]

    expand(grammar.start, 0)
    return words, parents


def pcfg_generate(grammar: Grammar, n: int, seed: int, sentences_per_doc: int | None = None,
                  rule_counts: dict[int, int] | None = None) -> list[Sentence]:
    """Sample ``n`` sentences with gold word trees.

    With ``sentences_per_doc`` set, consecutive sentences are grouped into
    documents and every document draws one topic (when the grammar has
    topics) that biases lexical choices throughout. Otherwise each sentence is
    its own document and no topic is used. Derivations deeper than
    ``max_depth`` or longer than ``max_len`` are resampled.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    rng = stream(seed, "pcfg")
    out: list[Sentence] = []
    topic = None
    for i in range(n):
        if sentences_per_doc:
            doc = i // sentences_per_doc
            if i % sentences_per_doc == 0 and grammar.topics:
                topic = int(rng.integers(len(grammar.topics)))
        else:
            doc = i
        for _ in range(MAX_RETRIES):
            counts: dict[int, int] | None = {} if rule_counts is not None else None
            try:
                words, parents = _derive(grammar, rng, topic, counts)
            except _TooDeep:
                continue
            break
        else:
            raise GrammarError(f"no derivation within depth {grammar.max_depth} after {MAX_RETRIES} tries")
        if rule_counts is not None:
            for k, v in counts.items():
                rule_counts[k] = rule_counts.get(k, 0) + v
        out.append(Sentence(i, words, parents, doc))
    return out


# -- trees -----------------------------------------------------------------
def check_tree(parents) -> None:
    parents = list(parents)
    n = len(parents)
    roots = [i for i, p in enumerate(parents) if p == -1]
    if len(roots) != 1:
        raise TreeError(f"tree needs exactly one root, found {len(roots)}")
    for i, p in enumerate(parents):
        if p != -1 and not 0 <= p < n:
            raise TreeError(f"parent index {p} out of range")
    for i in range(n):
        seen = 0
        j = i
        while parents[j] != -1:
            j = parents[j]
            seen += 1
            if seen > n:
                raise TreeError("cycle in parent array")


def tree_depths(parents) -> list[int]:
    depth = [-1] * len(parents)

    def walk(i: int) -> int:
        if depth[i] < 0:
            depth[i] = 0 if parents[i] == -1 else walk(parents[i]) + 1
        return depth[i]

    for i in range(len(parents)):
        walk(i)
    return depth


def tree_distance_matrix(tree) -> np.ndarray:
    """Edge counts between every pair of words, via depths and lowest common ancestors."""
    parents = list(tree.parents if isinstance(tree, Sentence) else tree)
    check_tree(parents)
    n = len(parents)
    depth = tree_depths(parents)
    ancestors = []
    for i in range(n):
        chain = [i]
        while parents[chain[-1]] != -1:
            chain.append(parents[chain[-1]])
        ancestors.append(set(chain))
    D = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            lca_depth = max(depth[a] for a in ancestors[i] & ancestors[j])
            D[i, j] = D[j, i] = depth[i] + depth[j] - 2 * lca_depth
    return D


def tree_edges(parents) -> set[frozenset[int]]:
    return {frozenset((i, p)) for i, p in enumerate(parents) if p != -1}


def edges_to_parents(n: int, edges, root: int = 0) -> list[int]:
    """Orient an undirected spanning tree away from ``root``."""
    adj: list[list[int]] = [[] for _ in range(n)]
    for a, b in edges:
        adj[a].append(b)
        adj[b].append(a)
    parents = [-2] * n
    parents[root] = -1
    queue = deque([root])
    while queue:
        u = queue.popleft()
        for v in sorted(adj[u]):
            if parents[v] == -2:
                parents[v] = u
                queue.append(v)
    if -2 in parents:
        raise TreeError("edge set does not span all words")
    return parents


def random_tree(n: int, rng: np.random.Generator) -> list[int]:
    """Uniform random recursive tree on ``n`` nodes, root at a random position."""
    order = rng.permutation(n)
    parents = [-1] * n
    for k in range(1, n):
        parents[order[k]] = int(order[rng.integers(k)])
    return parents


# -- pretraining tasks -----------------------------------------------------
def mask_corpus(sentences: list[Sentence], mask_rate: float, seed: int, mask_id: int,
                stream_path: tuple = ()) -> list[MaskedExample]:
    """Mask each token independently; a sentence that draws no mask gets one at random."""
    if not 0.0 < mask_rate < 1.0:
        raise ValueError("mask_rate must be in (0, 1)")
    rng = stream(seed, "mask", *stream_path)
    out = []
    for s in sentences:
        hits = rng.random(len(s.tokens)) < mask_rate
        if not hits.any():
            hits[int(rng.integers(len(s.tokens)))] = True
        positions = [int(i) for i in np.flatnonzero(hits)]
        inputs = list(s.tokens)
        for i in positions:
            inputs[i] = mask_id
        out.append(MaskedExample(s.id, inputs, [s.tokens[i] for i in positions], positions))
    return out


def continuation_pairs(sentences: list[Sentence], seed: int) -> list[ContinuationPair]:
    """Every consecutive in-document pair as a positive, each matched by a negative.

    The negative keeps sentence A and draws B from a different document, so
    labels are exactly balanced and A is never paired with itself.
    """
    by_doc: dict[int, list[Sentence]] = {}
    for s in sentences:
        by_doc.setdefault(s.doc, []).append(s)
    docs = sorted(by_doc)
    if len(docs) < 2:
        raise ValueError("need at least two documents to build unrelated pairs")
    positives = [(a, b) for d in docs for a, b in zip(by_doc[d], by_doc[d][1:])]
    if not positives:
        raise ValueError("no document has two consecutive sentences")
    doc_pos = {d: i for i, d in enumerate(docs)}
    rng = stream(seed, "continuation")
    pairs = []
    for a, b in positives:
        pairs.append(ContinuationPair(a.tokens, b.tokens, 1, a.id, b.id))
        k = int(rng.integers(len(docs) - 1))
        other = docs[k] if k < doc_pos[a.doc] else docs[k + 1]
        pool = by_doc[other]
        c = pool[int(rng.integers(len(pool)))]
        pairs.append(ContinuationPair(a.tokens, c.tokens, 0, a.id, c.id))
    order = rng.permutation(len(pairs))
    return [pairs[i] for i in order]


# -- files -----------------------------------------------------------------
def save_corpus(sentences: list[Sentence], path) -> None:
    with open(path, "w") as fh:
        for s in sentences:
            fh.write(json.dumps(s.to_record(), separators=(",", ":")) + "\n")


def load_corpus(path) -> list[Sentence]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                s = Sentence(int(rec["id"]), [int(t) for t in rec["tokens"]],
                             [int(p) for p in rec["parents"]], int(rec.get("doc", 0)))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad corpus record ({exc})") from exc
            if len(s.tokens) != len(s.parents) or not s.tokens:
                raise ValueError(f"{path}:{lineno}: tokens and parents differ in length")
            out.append(s)
    if not out:
        raise ValueError(f"{path}: empty corpus")
    return out


def unigram_counts(sentences: list[Sentence], vocab_size: int) -> np.ndarray:
    counts = np.zeros(vocab_size, dtype=np.int64)
    for s in sentences:
        np.add.at(counts, s.tokens, 1)
    return counts
