"""Synthetic associative-recall tasks for desk-scale runs: each query names a
rare key token whose label can be copied from the demonstrations that share it.
BM25 retrieval has a strong signal (the key), so selection quality is testable
without real model weights.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import kernels
from .errors import ValidationError
from .pipeline import Demonstration

LABEL_WORDS = (
    "alpha", "bravo", "carol", "delta", "echo", "fox", "golf", "hotel",
    "india", "jazz", "kilo", "lima", "mike", "nova", "oscar", "papa",
)

FILLER_WORDS = (
    "please", "kindly", "record", "note", "check", "confirm", "review",
    "item", "entry", "ticket", "case", "fact",
)


@dataclass(frozen=True)
class RecallTask:
    pool: tuple[Demonstration, ...]
    tests: tuple[Demonstration, ...]
    labels: tuple[str, ...]


def generate_recall_task(
    n_demos: int,
    n_tests: int,
    n_labels: int = 4,
    n_keys: int | None = None,
    seed: int = 0,
) -> RecallTask:
    """Key -> label lookups. Every test query repeats a pool key, so its answer
    is retrievable from the demonstrations."""
    if n_labels < 1 or n_labels > len(LABEL_WORDS):
        raise ValidationError(f"n_labels must be in [1, {len(LABEL_WORDS)}]")
    if n_demos < 1 or n_tests < 1:
        raise ValidationError("need at least one demonstration and one test")
    rng = kernels.make_rng(seed)
    labels = LABEL_WORDS[:n_labels]
    n_keys = n_keys or max(4, n_demos // 3)
    key_labels = {f"key{k:04d}": labels[int(rng.integers(n_labels))] for k in range(n_keys)}
    keys = list(key_labels)

    def make_query(key: str) -> str:
        w1 = FILLER_WORDS[int(rng.integers(len(FILLER_WORDS)))]
        w2 = FILLER_WORDS[int(rng.integers(len(FILLER_WORDS)))]
        return f"{w1} {w2} lookup {key}"

    pool = []
    used_keys = []
    for i in range(n_demos):
        key = keys[int(rng.integers(n_keys))] if i >= n_keys else keys[i % n_keys]
        used_keys.append(key)
        pool.append(Demonstration(make_query(key), key_labels[key]))
    tests = []
    for _ in range(n_tests):
        key = used_keys[int(rng.integers(len(used_keys)))]
        tests.append(Demonstration(make_query(key), key_labels[key]))
    return RecallTask(tuple(pool), tuple(tests), labels)


def write_jsonl(demos, path) -> None:
    import json

    with open(path, "w", encoding="utf-8") as fh:
        for d in demos:
            fh.write(json.dumps({"query": d.query, "answer": d.answer}) + "\n")


def write_labels(labels, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(labels) + "\n")
