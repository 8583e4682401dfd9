"""End-to-end orchestration: Stage-1 sparse pool encoding, Stage-2 per-query
selection + assembly + constrained label scoring, and the baselines (cached
fixed-context ICL, no-cache retrieval ICL, zero-shot).
"""

from __future__ import annotations

import hashlib
import threading
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import kvstore, masks, model, retrieval, tokenizer
from .errors import CompatibilityError, ConfigError, ValidationError
from .metrics import Metrics, QueryMetrics, flops_attention

DBSA = "dbsa"
FIXED_ICL = "fixed"
RET_ICL = "ret"
ZERO_SHOT = "zero"
METHODS = (DBSA, FIXED_ICL, RET_ICL, ZERO_SHOT)
_METHOD_ALIASES = {
    "dbsa": DBSA,
    "fixed": FIXED_ICL,
    "fixed-icl": FIXED_ICL,
    "ret": RET_ICL,
    "ret-icl": RET_ICL,
    "reticl": RET_ICL,
    "zero": ZERO_SHOT,
    "zero-shot": ZERO_SHOT,
}

ABLATION_AXES = ("pattern", "granularity", "grouping", "ordering")


def canonical_method(name: str) -> str:
    try:
        return _METHOD_ALIASES[name.lower()]
    except KeyError:
        raise ValidationError(f"unknown method {name!r}; expected one of {METHODS}") from None


@dataclass(frozen=True)
class Demonstration:
    query: str
    answer: str

    def __post_init__(self) -> None:
        if not self.query.strip() or not self.answer.strip():
            raise ValidationError("demonstration query and answer must be non-empty")

    def raw_text(self) -> str:
        return f"{self.query} {self.answer}"


@dataclass(frozen=True)
class PromptTemplate:
    demo_format: str = "Q: {query}\nA: {answer}\n\n"
    query_format: str = "Q: {query}\nA:"
    label_format: str = " {label}"

    def render_demo(self, demo: Demonstration) -> str:
        return self.demo_format.format(query=demo.query, answer=demo.answer)

    def render_query(self, query: str) -> str:
        return self.query_format.format(query=query)

    def render_label(self, label: str) -> str:
        return self.label_format.format(label=label)


@dataclass(frozen=True)
class TaskSpec:
    pool: tuple[Demonstration, ...]
    labels: tuple[str, ...]
    template: PromptTemplate = PromptTemplate()

    def __post_init__(self) -> None:
        if not self.pool:
            raise ValidationError("demonstration pool must be non-empty")
        if not self.labels:
            raise ValidationError("label set must be non-empty")
        if len(set(self.labels)) != len(self.labels):
            raise ValidationError("labels must be distinct")
        label_set = set(self.labels)
        for d in self.pool:
            if d.answer not in label_set:
                raise ValidationError(f"pool answer {d.answer!r} is not in the label set")


@dataclass(frozen=True)
class MethodConfig:
    method: str = DBSA
    pattern: masks.AttentionPattern = masks.AttentionPattern.sink_prev_self(2)
    block_size: int = 50
    ratio: float = 0.30
    granularity: str = kvstore.BLOCK_GRANULARITY
    grouping: retrieval.GroupingStrategy = field(
        default_factory=lambda: retrieval.GroupingStrategy.random(0)
    )
    ordering: str = retrieval.IN_ORDER
    seed: int = 0
    max_pool_tokens: int = 262144

    def __post_init__(self) -> None:
        object.__setattr__(self, "method", canonical_method(self.method))
        if self.block_size < 1:
            raise ConfigError(f"block_size must be >= 1, got {self.block_size}")
        if not 0.0 < self.ratio <= 1.0:
            raise ConfigError(f"ratio must be in (0, 1], got {self.ratio}")
        if self.granularity not in kvstore.GRANULARITIES:
            raise ConfigError(f"unknown granularity {self.granularity!r}")
        if self.ordering not in retrieval.ORDERINGS:
            raise ConfigError(f"unknown ordering {self.ordering!r}")

    @property
    def local_blocks(self) -> int:
        return self.pattern.local_blocks

    def digest(self) -> str:
        """Config identity; seeds are deliberately excluded so runs of the same
        config with differing seeds share a digest."""
        parts = (
            self.method,
            self.pattern.kind,
            str(self.pattern.local_blocks),
            str(self.block_size),
            f"{self.ratio:.6f}",
            self.granularity,
            self.grouping.kind,
            f"{self.grouping.swap_fraction:.6f}",
            self.ordering,
        )
        return hashlib.sha256("|".join(parts).encode("utf-8")).hexdigest()[:16]


@dataclass
class EncodedPool:
    cache: kvstore.SegmentedKVCache
    index: retrieval.Bm25Index
    partition: retrieval.BlockPartition
    metrics: Metrics
    encode_seconds: float = 0.0
    index_seconds: float = 0.0


def _render_block(
    template: PromptTemplate, pool: tuple[Demonstration, ...], members: tuple[int, ...]
) -> tuple[str, list[int], tuple[tuple[int, int], ...]]:
    """Rendered block text, its token ids, and per-demo token spans."""
    text_parts: list[str] = []
    spans: list[tuple[int, int]] = []
    offset = 0
    for e in members:
        part = template.render_demo(pool[e])
        n = len(tokenizer.encode(part))
        spans.append((offset, offset + n))
        offset += n
        text_parts.append(part)
    text = "".join(text_parts)
    return text, tokenizer.encode(text), tuple(spans)


def encode_blocks(
    weights: model.ModelWeights,
    cache: kvstore.SegmentedKVCache,
    new_blocks: list[tuple[list[int], bytes, tuple[tuple[int, int], ...]]],
    pattern: masks.AttentionPattern,
) -> int:
    """Append `new_blocks` (token ids, text digest, demo spans) to the cache,
    encoding each against its allowed context under `pattern`.

    Encoding one more block touches a context bounded by the anchor plus j
    previous blocks, so the attended-pair cost per new block is constant in
    the pool size. Returns the attended (query, key) pair count.
    """
    cfg = weights.config
    first_new = cache.n_blocks
    n_blocks = first_new + len(new_blocks)
    block_mask = masks.build_block_mask(n_blocks, pattern)
    counts = [e.token_count for e in cache.blocks] + [len(ids) for ids, _, _ in new_blocks]
    offsets = np.concatenate([[0], np.cumsum(counts)])
    if int(offsets[-1]) >= cfg.max_seq_len:
        raise ValidationError(
            f"pool of {int(offsets[-1])} tokens exceeds max_seq_len {cfg.max_seq_len}"
        )
    rotated: dict[int, list[model.LayerKV]] = {}

    def rotated_block(block_id: int) -> list[model.LayerKV]:
        if block_id not in rotated:
            entry = cache.blocks[block_id]
            positions = np.arange(entry.pos_start, entry.pos_end, dtype=np.int64)
            layers = []
            for layer in range(cfg.n_layers):
                k, v = cache.segment(layer, block_id)
                layers.append((model.rope_rotate_heads(k, positions, cfg.rope_theta), v))
            rotated[block_id] = layers
        return rotated[block_id]

    attended = 0
    for offset, (ids, digest, spans) in enumerate(new_blocks):
        block_id = first_new + offset
        ctx_ids = block_mask.context_ids(block_id)
        ctx_positions = (
            np.concatenate(
                [np.arange(offsets[j], offsets[j + 1], dtype=np.int64) for j in ctx_ids]
            )
            if ctx_ids
            else np.zeros(0, dtype=np.int64)
        )
        ctx_layers: list[model.LayerKV] = []
        for layer in range(cfg.n_layers):
            segs = [rotated_block(j)[layer] for j in ctx_ids]
            if segs:
                ctx_layers.append(
                    (
                        np.concatenate([s[0] for s in segs]),
                        np.concatenate([s[1] for s in segs]),
                    )
                )
            else:
                z = np.zeros((0, cfg.n_kv_heads, cfg.head_dim), dtype=np.float32)
                ctx_layers.append((z, z))
        context = model.ContextKV(ctx_positions, ctx_layers)
        tokens = model.TokenSequence.at_offset(ids, int(offsets[block_id]))
        token_mask = masks.block_mask_rows(block_mask, counts, block_id)
        pre_kv, _ = model.forward_encode(weights, tokens, context, token_mask)
        cache.append_block(block_id, pre_kv, digest, spans)
        t = len(ids)
        attended += len(ctx_positions) * t + t * (t + 1) // 2
    return attended


def build_index(
    task: TaskSpec,
    partition: retrieval.BlockPartition,
    spans_per_block: list[tuple[tuple[int, int], ...]],
    granularity: str,
) -> retrieval.Bm25Index:
    """Unit texts and cache coordinates for the configured granularity."""
    pool = task.pool
    if granularity == kvstore.BLOCK_GRANULARITY:
        texts = [
            " ".join(pool[e].raw_text() for e in members) for members in partition.blocks
        ]
        refs = [
            (b, 0, spans_per_block[b][-1][1]) for b in range(partition.n_blocks)
        ]
        examples = [tuple(members) for members in partition.blocks]
    else:
        anchor_members = partition.blocks[0]
        texts = [" ".join(pool[e].raw_text() for e in anchor_members)]
        refs = [(0, 0, spans_per_block[0][-1][1])]
        examples = [tuple(anchor_members)]
        for b in range(1, partition.n_blocks):
            for slot, e in enumerate(partition.blocks[b]):
                texts.append(pool[e].raw_text())
                refs.append((b, *spans_per_block[b][slot]))
                examples.append((e,))
    return retrieval.Bm25Index(texts, granularity, refs, examples)


def _partition_and_render(task: TaskSpec, config: MethodConfig):
    # The run seed drives grouping so differing-seed runs get differing partitions.
    grouping = replace(config.grouping, seed=config.seed)
    raw_texts = [d.raw_text() for d in task.pool]
    partition = retrieval.group(raw_texts, config.block_size, grouping)
    rendered = [
        _render_block(task.template, task.pool, members) for members in partition.blocks
    ]
    return partition, rendered


def build_index_only(
    task: TaskSpec, config: MethodConfig
) -> tuple[retrieval.Bm25Index, retrieval.BlockPartition, float]:
    """Retrieval setup without any KV encoding (the no-cache baseline's setup)."""
    t0 = time.perf_counter()
    partition, rendered = _partition_and_render(task, config)
    index = build_index(task, partition, [spans for _, _, spans in rendered], config.granularity)
    return index, partition, time.perf_counter() - t0


def encode_pool(
    weights: model.ModelWeights, task: TaskSpec, config: MethodConfig
) -> EncodedPool:
    """Stage 1: group, tokenize and sparsely encode the pool; build the index."""
    t0 = time.perf_counter()
    partition, rendered = _partition_and_render(task, config)
    total_tokens = sum(len(ids) for _, ids, _ in rendered)
    if total_tokens > config.max_pool_tokens:
        raise ValidationError(
            f"pool of {total_tokens} tokens exceeds the configured limit "
            f"{config.max_pool_tokens}"
        )
    cache = kvstore.SegmentedKVCache(weights.config)
    new_blocks = [
        (ids, hashlib.sha256(text.encode("utf-8")).digest(), spans)
        for text, ids, spans in rendered
    ]
    attended = encode_blocks(weights, cache, new_blocks, config.pattern)
    cache.seal()
    encode_seconds = time.perf_counter() - t0

    t1 = time.perf_counter()
    index = build_index(task, partition, [spans for _, _, spans in rendered], config.granularity)
    index_seconds = time.perf_counter() - t1

    metrics = Metrics(
        setup_seconds=encode_seconds + index_seconds,
        cache_bytes=kvstore.storage_bytes(weights.config, cache.total_tokens, 4),
    )
    metrics.attended_tokens.append(attended)
    metrics.attention_flops.append(
        flops_attention(attended, weights.config, cache.total_tokens)
    )
    return EncodedPool(cache, index, partition, metrics, encode_seconds, index_seconds)


class Runner:
    """Per-method inference session over a shared (weights, cache, index) triple.

    Stage-2 queries are pure given these inputs and can run concurrently; the
    runner itself holds only read-only state after `prepare()`.
    """

    def __init__(
        self,
        weights: model.ModelWeights,
        cache: kvstore.SegmentedKVCache | None,
        index: retrieval.Bm25Index | None,
        task: TaskSpec,
        config: MethodConfig,
    ):
        self.weights = weights
        self.cache = cache
        self.index = index
        self.task = task
        self.config = config
        self.method = config.method
        if self.method in (DBSA, FIXED_ICL) and cache is None:
            raise ValidationError(f"method {self.method!r} requires an encoded cache")
        if self.method in (DBSA, RET_ICL) and index is None:
            raise ValidationError(f"method {self.method!r} requires a retrieval index")
        if cache is not None and cache.config_hash != weights.config_hash:
            raise CompatibilityError("cache and weights were built for different configs")
        # Labels are scored in lexicographic order so score ties resolve to the
        # lexicographically smallest label.
        self.labels = sorted(task.labels)
        self.label_ids = [
            tokenizer.encode(task.template.render_label(label)) for label in self.labels
        ]
        self._full_assembled: kvstore.AssembledCache | None = None
        self._prepare_lock = threading.Lock()

    def prepare(self) -> None:
        """One-time per-session work (the fixed method's full assembly).
        Safe to race from worker threads; later queries see read-only state."""
        if self.method == FIXED_ICL and self._full_assembled is None:
            with self._prepare_lock:
                if self._full_assembled is None:
                    assert self.cache is not None
                    self._full_assembled = kvstore.assemble(
                        self.cache, kvstore.all_blocks_selection(self.cache)
                    )

    def _score_against(
        self, assembled: kvstore.AssembledCache, query_ids: list[int]
    ) -> tuple[str, int]:
        best_label = None
        best_score = -np.inf
        pairs = 0
        t_ctx = assembled.total_tokens
        for label, label_ids in zip(self.labels, self.label_ids):
            score = model.score_label(self.weights, assembled, query_ids, label_ids)
            n = len(query_ids) + len(label_ids)
            pairs += n * t_ctx + n * (n + 1) // 2
            if score > best_score:
                best_score = score
                best_label = label
        assert best_label is not None
        return best_label, pairs

    def _scoring_tokens(self, query_ids: list[int]) -> int:
        return sum(len(query_ids) + len(ids) for ids in self.label_ids)

    def infer(self, query_text: str) -> tuple[str, QueryMetrics]:
        cfg = self.config
        qm = QueryMetrics()
        t_start = time.perf_counter()
        query_ids = tokenizer.encode(self.task.template.render_query(query_text))
        projected_tokens = self._scoring_tokens(query_ids)

        if self.method == ZERO_SHOT:
            assembled = kvstore.AssembledCache.empty(self.weights.config)
            t0 = time.perf_counter()
            label, pairs = self._score_against(assembled, query_ids)
            qm.scoring_seconds = time.perf_counter() - t0
        elif self.method == FIXED_ICL:
            t0 = time.perf_counter()
            self.prepare()
            assembled = self._full_assembled
            assert assembled is not None
            qm.assembly_seconds = time.perf_counter() - t0
            t0 = time.perf_counter()
            label, pairs = self._score_against(assembled, query_ids)
            qm.scoring_seconds = time.perf_counter() - t0
        elif self.method == DBSA:
            assert self.index is not None and self.cache is not None
            t0 = time.perf_counter()
            selection = retrieval.select(self.index, query_text, cfg.ratio, cfg.granularity)
            selection = retrieval.order(selection, cfg.ordering)
            qm.retrieval_seconds = time.perf_counter() - t0
            t0 = time.perf_counter()
            assembled = kvstore.assemble(self.cache, selection)
            qm.assembly_seconds = time.perf_counter() - t0
            t0 = time.perf_counter()
            label, pairs = self._score_against(assembled, query_ids)
            qm.scoring_seconds = time.perf_counter() - t0
        else:  # RET_ICL: re-encode the selected demonstrations from text
            assert self.index is not None
            t0 = time.perf_counter()
            selection = retrieval.select(self.index, query_text, cfg.ratio, cfg.granularity)
            selection = retrieval.order(selection, cfg.ordering)
            qm.retrieval_seconds = time.perf_counter() - t0
            t0 = time.perf_counter()
            context_ids: list[int] = []
            for unit in selection.units:
                for e in self.index.unit_examples[unit.unit_id]:
                    context_ids.extend(
                        tokenizer.encode(self.task.template.render_demo(self.task.pool[e]))
                    )
            assembled, encode_pairs = self._dense_context(context_ids)
            qm.assembly_seconds = time.perf_counter() - t0
            projected_tokens += len(context_ids)
            t0 = time.perf_counter()
            label, pairs = self._score_against(assembled, query_ids)
            pairs += encode_pairs
            qm.scoring_seconds = time.perf_counter() - t0

        qm.attended_pairs = pairs
        qm.attention_flops = flops_attention(pairs, self.weights.config, projected_tokens)
        qm.total_seconds = time.perf_counter() - t_start
        return label, qm

    def _dense_context(self, context_ids: list[int]) -> tuple[kvstore.AssembledCache, int]:
        """Causal no-cache encoding of rendered context text (the no-reuse path)."""
        cfg = self.weights.config
        if not context_ids:
            return kvstore.AssembledCache.empty(cfg), 0
        n = len(context_ids)
        tokens = model.TokenSequence.at_offset(context_ids, 0)
        token_mask = np.tril(np.ones((n, n), dtype=bool))
        pre_kv, _ = model.forward_encode(self.weights, tokens, None, token_mask)
        positions = np.arange(n, dtype=np.int64)
        layers = tuple(
            (model.rope_rotate_heads(k, positions, cfg.rope_theta), v) for k, v in pre_kv
        )
        assembled = kvstore.AssembledCache(
            self.weights.config_hash,
            n,
            layers,
            np.full(n, -1, dtype=np.int64),
            positions.copy(),
        )
        return assembled, n * (n + 1) // 2


def infer(
    weights: model.ModelWeights,
    cache: kvstore.SegmentedKVCache | None,
    index: retrieval.Bm25Index | None,
    config: MethodConfig,
    query_text: str,
    task: TaskSpec,
) -> tuple[str, QueryMetrics]:
    """Single-query convenience wrapper over `Runner`."""
    runner = Runner(weights, cache, index, task, config)
    runner.prepare()
    return runner.infer(query_text)


@dataclass
class AblationRow:
    axis: str
    value: str
    config_digest: str
    accuracy: float
    n_queries: int
    mean_attended_pairs: float
    mean_attention_flops: float
    selected_ids_per_query: tuple[tuple[int, ...], ...]
    wall_seconds: float


def _selection_multiset(runner: Runner, query_text: str) -> tuple[int, ...]:
    if runner.method != DBSA or runner.index is None:
        return ()
    selection = retrieval.select(
        runner.index, query_text, runner.config.ratio, runner.config.granularity
    )
    return tuple(sorted(selection.unit_ids))


def run_ablation(
    weights: model.ModelWeights,
    task: TaskSpec,
    tests: list[Demonstration],
    axis: str,
    grid: list | None = None,
    base: MethodConfig | None = None,
) -> list[AblationRow]:
    """One row per configuration along the requested axis, fixed seeds.

    The pattern axis compares encodings with Stage-2 attending the full cache
    (ratio 1.0, original order); the remaining axes vary retrieval knobs.
    """
    if axis not in ABLATION_AXES:
        raise ValidationError(f"unknown ablation axis {axis!r}; expected one of {ABLATION_AXES}")
    base = base or MethodConfig(method=DBSA)
    if grid is None:
        grid = {
            "pattern": [
                masks.AttentionPattern.full(),
                masks.AttentionPattern.sink_prev_self(base.pattern.local_blocks),
                masks.AttentionPattern.sink_self(),
                masks.AttentionPattern.self_only(),
            ],
            "granularity": list(kvstore.GRANULARITIES),
            "grouping": [
                retrieval.GroupingStrategy.random(base.seed),
                retrieval.GroupingStrategy.clustered(base.seed),
                retrieval.GroupingStrategy.clustered_diverse(base.seed),
            ],
            "ordering": list(retrieval.ORDERINGS),
        }[axis]
    if not grid:
        raise ValidationError("ablation grid must be non-empty")

    rows: list[AblationRow] = []
    shared: EncodedPool | None = None
    for value in grid:
        if axis == "pattern":
            config = replace(base, pattern=value, ratio=1.0, ordering=retrieval.IN_ORDER)
            encoded = encode_pool(weights, task, config)
        elif axis == "grouping":
            config = replace(base, grouping=value)
            encoded = encode_pool(weights, task, config)
        elif axis == "granularity":
            config = replace(base, granularity=value)
            encoded = encode_pool(weights, task, config)
        else:
            config = replace(base, ordering=value)
            if shared is None:
                shared = encode_pool(weights, task, config)
            encoded = shared

        runner = Runner(weights, encoded.cache, encoded.index, task, config)
        runner.prepare()
        t0 = time.perf_counter()
        correct = 0
        pair_list: list[int] = []
        flop_list: list[int] = []
        multisets: list[tuple[int, ...]] = []
        for test in tests:
            label, qm = runner.infer(test.query)
            correct += int(label == test.answer)
            pair_list.append(qm.attended_pairs)
            flop_list.append(qm.attention_flops)
            multisets.append(_selection_multiset(runner, test.query))
        rows.append(
            AblationRow(
                axis=axis,
                value=_grid_label(axis, value),
                config_digest=config.digest(),
                accuracy=correct / len(tests) if tests else 0.0,
                n_queries=len(tests),
                mean_attended_pairs=float(np.mean(pair_list)) if pair_list else 0.0,
                mean_attention_flops=float(np.mean(flop_list)) if flop_list else 0.0,
                selected_ids_per_query=tuple(multisets),
                wall_seconds=time.perf_counter() - t0,
            )
        )
    return rows


def _grid_label(axis: str, value) -> str:
    if axis == "pattern":
        return value.kind if value.kind != masks.SINK_PREV_SELF else (
            f"{value.kind}(j={value.local_blocks})"
        )
    if axis == "grouping":
        return value.kind
    return str(value)
