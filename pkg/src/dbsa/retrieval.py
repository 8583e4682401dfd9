"""BM25 indexing and scoring over blocks or individual demonstrations,
block-grouping strategies, selection with a forced anchor, and ordering
strategies.

Relevance units depend on granularity: with block granularity every block is
one unit (its text is the concatenation of its demonstrations); with example
granularity unit 0 is the anchor block as a whole and the remaining units are
the individual non-anchor demonstrations.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ValidationError
from .kvstore import BLOCK_GRANULARITY, GRANULARITIES, SegmentRef, Selection

IN_ORDER = "in-order"
LOW_TO_HIGH = "low-to-high"
REVERSE = "reverse"
ORDERINGS = (IN_ORDER, LOW_TO_HIGH, REVERSE)

RANDOM = "random"
CLUSTERED = "clustered"
CLUSTERED_DIVERSE = "clustered-diverse"
GROUPINGS = (RANDOM, CLUSTERED, CLUSTERED_DIVERSE)

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)

DEFAULT_K1 = 1.2
DEFAULT_B = 0.75


def bm25_tokenize(text: str) -> list[str]:
    """Lowercase terms split on non-alphanumeric runs; empty terms dropped."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class GroupingStrategy:
    kind: str
    seed: int = 0
    swap_fraction: float = 0.10

    def __post_init__(self) -> None:
        if self.kind not in GROUPINGS:
            raise ValidationError(f"unknown grouping {self.kind!r}; expected one of {GROUPINGS}")
        if not 0.0 <= self.swap_fraction <= 1.0:
            raise ValidationError(f"swap_fraction must be in [0, 1], got {self.swap_fraction}")

    @classmethod
    def random(cls, seed: int = 0) -> "GroupingStrategy":
        return cls(RANDOM, seed)

    @classmethod
    def clustered(cls, seed: int = 0) -> "GroupingStrategy":
        return cls(CLUSTERED, seed)

    @classmethod
    def clustered_diverse(cls, seed: int = 0, swap_fraction: float = 0.10) -> "GroupingStrategy":
        return cls(CLUSTERED_DIVERSE, seed, swap_fraction)


@dataclass(frozen=True)
class BlockPartition:
    """Disjoint cover of the pool: blocks[b] lists pool indices of block b."""

    blocks: tuple[tuple[int, ...], ...]

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def n_examples(self) -> int:
        return sum(len(b) for b in self.blocks)

    def block_of(self) -> dict[int, int]:
        return {e: b for b, members in enumerate(self.blocks) for e in members}


class Bm25Index:
    """Inverted statistics (tf, df, lengths) plus unit metadata for assembly.

    `unit_refs[u]` locates unit u inside the cache (block id and token span;
    the span is filled in by the pipeline once blocks are tokenized) and
    `unit_examples[u]` lists the pool indices the unit covers.
    """

    def __init__(
        self,
        texts: list[str],
        granularity: str,
        unit_refs: list[tuple[int, int, int]],
        unit_examples: list[tuple[int, ...]],
        k1: float = DEFAULT_K1,
        b: float = DEFAULT_B,
    ):
        if granularity not in GRANULARITIES:
            raise ValidationError(f"unknown granularity {granularity!r}")
        if not (len(texts) == len(unit_refs) == len(unit_examples)):
            raise ValidationError("texts, unit_refs and unit_examples must align")
        if not texts:
            raise ValidationError("index needs at least one unit")
        self.granularity = granularity
        self.k1 = float(k1)
        self.b = float(b)
        self.unit_refs = [tuple(r) for r in unit_refs]
        self.unit_examples = [tuple(e) for e in unit_examples]
        self.doc_terms: list[Counter] = [Counter(bm25_tokenize(t)) for t in texts]
        self.doc_lens = [sum(c.values()) for c in self.doc_terms]
        self.n_docs = len(texts)
        self.avgdl = sum(self.doc_lens) / self.n_docs
        self.df: Counter = Counter()
        for terms in self.doc_terms:
            for term in terms:
                self.df[term] += 1

    def idf(self, term: str) -> float:
        df = self.df.get(term, 0)
        return math.log(1.0 + (self.n_docs - df + 0.5) / (df + 0.5))

    def score(self, query_terms: list[str], doc_id: int) -> float:
        if not 0 <= doc_id < self.n_docs:
            raise ValidationError(f"doc id {doc_id} outside index of {self.n_docs}")
        tf = self.doc_terms[doc_id]
        dl = self.doc_lens[doc_id]
        norm = self.k1 * (1.0 - self.b + self.b * dl / self.avgdl)
        total = 0.0
        for term in query_terms:
            f = tf.get(term, 0)
            if f == 0:
                continue
            total += self.idf(term) * f * (self.k1 + 1.0) / (f + norm)
        return total

    def to_json(self) -> dict:
        return {
            "granularity": self.granularity,
            "k1": self.k1,
            "b": self.b,
            "unit_refs": [list(r) for r in self.unit_refs],
            "unit_examples": [list(e) for e in self.unit_examples],
            "doc_terms": [dict(c) for c in self.doc_terms],
        }

    @classmethod
    def from_json(cls, data: dict) -> "Bm25Index":
        index = cls.__new__(cls)
        index.granularity = data["granularity"]
        index.k1 = float(data["k1"])
        index.b = float(data["b"])
        index.unit_refs = [tuple(r) for r in data["unit_refs"]]
        index.unit_examples = [tuple(e) for e in data["unit_examples"]]
        index.doc_terms = [Counter(c) for c in data["doc_terms"]]
        index.doc_lens = [sum(c.values()) for c in index.doc_terms]
        index.n_docs = len(index.doc_terms)
        index.avgdl = sum(index.doc_lens) / index.n_docs
        index.df = Counter()
        for terms in index.doc_terms:
            for term in terms:
                index.df[term] += 1
        return index

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def load(cls, path) -> "Bm25Index":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def bm25_score(index: Bm25Index, query_terms: list[str], doc_id: int) -> float:
    return index.score(query_terms, doc_id)


# ---------------------------------------------------------------------------
# Grouping
# ---------------------------------------------------------------------------


def _chunk(order: list[int], block_size: int) -> tuple[tuple[int, ...], ...]:
    return tuple(
        tuple(order[i : i + block_size]) for i in range(0, len(order), block_size)
    )


def _similarity_matrix(texts: list[str]) -> np.ndarray:
    probe = Bm25Index(
        texts,
        BLOCK_GRANULARITY,
        [(0, 0, 0)] * len(texts),
        [()] * len(texts),
    )
    n = len(texts)
    sim = np.zeros((n, n), dtype=np.float64)
    terms = [bm25_tokenize(t) for t in texts]
    for i in range(n):
        for j in range(n):
            sim[i, j] = probe.score(terms[i], j)
    sim = 0.5 * (sim + sim.T)
    peak = sim.max()
    if peak > 0:
        sim = sim / peak
    np.fill_diagonal(sim, 1.0)
    return sim


def _k_medoids(dist, n_clusters: int, rng, max_iter: int = 50) -> list[int]:
    n = dist.shape[0]
    medoids = sorted(int(i) for i in rng.choice(n, size=n_clusters, replace=False))
    for _ in range(max_iter):
        assignment = np.argmin(dist[:, medoids], axis=1)
        new_medoids = []
        for c in range(n_clusters):
            members = np.flatnonzero(assignment == c)
            if members.size == 0:
                new_medoids.append(medoids[c])
                continue
            within = dist[np.ix_(members, members)].sum(axis=1)
            new_medoids.append(int(members[int(np.argmin(within))]))
        new_medoids = sorted(new_medoids)
        if new_medoids == medoids:
            break
        medoids = new_medoids
    return medoids


def _balanced_clusters(dist, medoids: list[int], capacities: list[int]) -> list[list[int]]:
    n = dist.shape[0]
    pairs = sorted(
        (float(dist[i, m]), i, c) for i in range(n) for c, m in enumerate(medoids)
    )
    remaining = list(capacities)
    assigned: dict[int, int] = {}
    clusters: list[list[int]] = [[] for _ in medoids]
    for _, i, c in pairs:
        if i in assigned or remaining[c] == 0:
            continue
        assigned[i] = c
        clusters[c].append(i)
        remaining[c] -= 1
    for members in clusters:
        members.sort()
    return clusters


def _diversity_rotation(
    blocks: list[list[int]], swap_fraction: float, rng
) -> tuple[tuple[int, ...], ...]:
    """Displace exactly floor(swap_fraction * n) examples by cyclically rotating
    their block assignments; block sizes are preserved.

    Parity limits: with two blocks an odd displacement count is impossible
    under size preservation, and a count of 1 is always impossible; the count
    is rounded down to the nearest feasible value in those cases.
    """
    n = sum(len(b) for b in blocks)
    n_blocks = len(blocks)
    m = int(swap_fraction * n)
    if n_blocks < 2 or m < 2:
        return tuple(tuple(b) for b in blocks)
    if n_blocks == 2 and m % 2 == 1:
        m -= 1
    block_of = {e: b for b, members in enumerate(blocks) for e in members}
    cap = m // 2
    order = list(rng.permutation(n))
    chosen: list[int] = []
    counts: Counter = Counter()
    for e in order:
        b = block_of[int(e)]
        if counts[b] < cap:
            chosen.append(int(e))
            counts[b] += 1
            if len(chosen) == m:
                break
    if len(chosen) < m:
        m = len(chosen) - (len(chosen) % 2)
        chosen = chosen[:m]
        if m < 2:
            return tuple(tuple(b) for b in blocks)
    # Interleave the largest groups across even then odd slots so that no two
    # cyclically adjacent chosen examples share a block (valid when every
    # group count <= floor(m/2), which the cap above enforced).
    groups: dict[int, list[int]] = {}
    for e in chosen:
        groups.setdefault(block_of[e], []).append(e)
    ordered_groups = sorted(groups.values(), key=lambda g: (-len(g), g[0]))
    flat = [e for g in ordered_groups for e in g]
    ring: list[int] = [0] * len(chosen)
    slots = list(range(0, len(chosen), 2)) + list(range(1, len(chosen), 2))
    for slot, e in zip(slots, flat):
        ring[slot] = e
    for idx, e in enumerate(ring):
        if block_of[e] == block_of[ring[(idx + 1) % len(ring)]]:
            raise AssertionError("diversity rotation produced an invalid arrangement")
    new_block = dict(block_of)
    for idx, e in enumerate(ring):
        new_block[e] = block_of[ring[(idx + 1) % len(ring)]]
    moved_in: list[list[int]] = [[] for _ in blocks]
    rebuilt: list[list[int]] = [[] for _ in blocks]
    displaced = set(e for e in ring if new_block[e] != block_of[e])
    for b, members in enumerate(blocks):
        for e in members:
            if e in displaced:
                moved_in[new_block[e]].append(e)
            else:
                rebuilt[b].append(e)
    for b in range(n_blocks):
        rebuilt[b].extend(sorted(moved_in[b]))
    return tuple(tuple(b) for b in rebuilt)


def group(texts: list[str], block_size: int, strategy: GroupingStrategy) -> BlockPartition:
    """Partition the pool into ceil(n / block_size) blocks of `block_size`."""
    n = len(texts)
    if n == 0:
        raise ValidationError("cannot group an empty pool")
    if block_size < 1:
        raise ValidationError(f"block_size must be >= 1, got {block_size}")
    if n < block_size:
        raise ValidationError(f"pool of {n} examples is smaller than block_size {block_size}")
    rng = kernels.make_rng(strategy.seed)
    if strategy.kind == RANDOM:
        order = [int(i) for i in rng.permutation(n)]
        return BlockPartition(_chunk(order, block_size))
    n_clusters = -(-n // block_size)
    dist = 1.0 - _similarity_matrix(texts)
    np.fill_diagonal(dist, 0.0)
    medoids = _k_medoids(dist, n_clusters, rng)
    capacities = [block_size] * n_clusters
    capacities[-1] = n - block_size * (n_clusters - 1)
    clusters = _balanced_clusters(dist, medoids, capacities)
    if strategy.kind == CLUSTERED:
        return BlockPartition(tuple(tuple(c) for c in clusters))
    return BlockPartition(_diversity_rotation(clusters, strategy.swap_fraction, rng))


# ---------------------------------------------------------------------------
# Selection and ordering
# ---------------------------------------------------------------------------


def select(
    index: Bm25Index,
    query_text: str,
    ratio: float,
    granularity: str | None = None,
) -> Selection:
    """Pick ceil(ratio * n_units) units: the anchor first, then the best BM25
    scores in descending order (ties broken by ascending unit id)."""
    if not 0.0 < ratio <= 1.0:
        raise ValidationError(f"ratio must be in (0, 1], got {ratio}")
    if granularity is not None and granularity != index.granularity:
        raise ValidationError(
            f"index granularity {index.granularity!r} does not match requested {granularity!r}"
        )
    terms = bm25_tokenize(query_text)
    budget = math.ceil(ratio * index.n_docs)
    scores = [index.score(terms, u) for u in range(index.n_docs)]
    candidates = sorted(range(1, index.n_docs), key=lambda u: (-scores[u], u))
    picked = [0] + candidates[: budget - 1]
    units = tuple(
        SegmentRef(u, *index.unit_refs[u], score=scores[u]) for u in picked
    )
    return Selection(index.granularity, units)


def order(selection: Selection, strategy: str) -> Selection:
    """Re-order the non-anchor units; the anchor is pinned first."""
    if strategy not in ORDERINGS:
        raise ValidationError(f"unknown ordering {strategy!r}; expected one of {ORDERINGS}")
    anchor, rest = selection.units[0], list(selection.units[1:])
    if strategy == IN_ORDER:
        rest.sort(key=lambda u: u.unit_id)
    elif strategy == LOW_TO_HIGH:
        rest.sort(key=lambda u: (u.score, u.unit_id))
    else:
        rest.sort(key=lambda u: -u.unit_id)
    return Selection(selection.granularity, (anchor, *rest))
