"""Efficiency ledger: per-query records, run-level aggregates, and the
attention FLOP model (inference cost grows linearly with attended pairs)."""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ValidationError


def flops_attention(attended_pairs: int, config, n_tokens: int = 0) -> int:
    """Exact integer FLOPs: QK and AV products over attended pairs, plus the
    Q/K/V/O projections for every processed token.

    `n_tokens` counts tokens actually run through the projections (cached
    context tokens are not re-projected); zero pairs with nonzero tokens
    yields the projection-only count.
    """
    if attended_pairs < 0 or n_tokens < 0:
        raise ValidationError("attended_pairs and n_tokens must be non-negative")
    per_pair = 2 * config.head_dim * config.n_heads * 2  # QK + AV multiply-adds
    pair_term = attended_pairs * per_pair * config.n_layers
    d = config.d_model
    proj = 2 * d * (config.n_heads * config.head_dim)  # Q
    proj += 2 * 2 * d * (config.n_kv_heads * config.head_dim)  # K and V
    proj += 2 * (config.n_heads * config.head_dim) * d  # O
    proj_term = n_tokens * proj * config.n_layers
    return pair_term + proj_term


@dataclass
class QueryMetrics:
    """Cost of answering one test query, with components kept separate so any
    aggregation (with or without retrieval time) stays derivable."""

    attended_pairs: int = 0
    attention_flops: int = 0
    retrieval_seconds: float = 0.0
    assembly_seconds: float = 0.0
    scoring_seconds: float = 0.0
    total_seconds: float = 0.0


@dataclass
class Metrics:
    """Aggregate for one run: setup cost plus per-query series."""

    setup_seconds: float = 0.0
    per_query_seconds: list[float] = field(default_factory=list)
    attended_tokens: list[int] = field(default_factory=list)
    attention_flops: list[int] = field(default_factory=list)
    cache_bytes: int = 0
    n_requests: int = 0

    def add_query(self, qm: QueryMetrics) -> None:
        self.per_query_seconds.append(qm.total_seconds)
        self.attended_tokens.append(qm.attended_pairs)
        self.attention_flops.append(qm.attention_flops)
        self.n_requests += 1

    def mean_query_seconds(self) -> float:
        if not self.per_query_seconds:
            return 0.0
        return sum(self.per_query_seconds) / len(self.per_query_seconds)

    def amortized_cost(self, n_requests: int | None = None) -> float:
        """setup / n + mean per-query seconds."""
        n = self.n_requests if n_requests is None else n_requests
        if n < 1:
            raise ValidationError(f"n_requests must be >= 1, got {n}")
        return self.setup_seconds / n + self.mean_query_seconds()

    def validate(self) -> None:
        values = [self.setup_seconds, self.cache_bytes, self.n_requests]
        values += self.per_query_seconds + self.attended_tokens + self.attention_flops
        if any(v < 0 for v in values):
            raise ValidationError("metrics must be non-negative")
