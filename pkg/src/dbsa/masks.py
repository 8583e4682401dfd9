"""Block-level and token-level attention masks for the four sparse patterns,
plus exact sparsity accounting.

Block ids are 0-based; block 0 is the anchor (attention sink) for every pool.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError

FULL = "full"
SINK_PREV_SELF = "sink-prev-self"
SINK_SELF = "sink-self"
SELF_ONLY = "self"

PATTERN_NAMES = (FULL, SINK_PREV_SELF, SINK_SELF, SELF_ONLY)


@dataclass(frozen=True)
class AttentionPattern:
    """One of: full, sink-prev-self (with j local blocks), sink-self, self."""

    kind: str
    local_blocks: int = 2

    def __post_init__(self) -> None:
        if self.kind not in PATTERN_NAMES:
            raise ConfigError(f"unknown pattern {self.kind!r}; expected one of {PATTERN_NAMES}")
        if self.local_blocks < 0:
            raise ConfigError(f"local_blocks must be >= 0, got {self.local_blocks}")

    @classmethod
    def full(cls) -> "AttentionPattern":
        return cls(FULL)

    @classmethod
    def sink_prev_self(cls, local_blocks: int = 2) -> "AttentionPattern":
        return cls(SINK_PREV_SELF, local_blocks)

    @classmethod
    def sink_self(cls) -> "AttentionPattern":
        return cls(SINK_SELF)

    @classmethod
    def self_only(cls) -> "AttentionPattern":
        return cls(SELF_ONLY)

    @classmethod
    def from_name(cls, name: str, local_blocks: int = 2) -> "AttentionPattern":
        return cls(name, local_blocks)


@dataclass(frozen=True)
class BlockMask:
    """Lower-triangular boolean matrix: allowed[i, j] means block i attends block j."""

    pattern: AttentionPattern
    allowed: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        self.allowed.setflags(write=False)

    @property
    def n_blocks(self) -> int:
        return self.allowed.shape[0]

    def allowed_pairs(self) -> int:
        return int(self.allowed.sum())

    def context_ids(self, block_id: int) -> tuple[int, ...]:
        """Allowed context blocks of `block_id` (excluding itself), ascending."""
        row = self.allowed[block_id]
        return tuple(int(j) for j in np.flatnonzero(row) if j < block_id)


def build_block_mask(n_blocks: int, pattern: AttentionPattern) -> BlockMask:
    if n_blocks < 1:
        raise ConfigError(f"n_blocks must be >= 1, got {n_blocks}")
    b = n_blocks
    allowed = np.zeros((b, b), dtype=bool)
    np.fill_diagonal(allowed, True)
    if pattern.kind == FULL:
        allowed = np.tril(np.ones((b, b), dtype=bool))
    elif pattern.kind == SINK_SELF:
        allowed[:, 0] = True
        allowed = np.tril(allowed)
    elif pattern.kind == SINK_PREV_SELF:
        j = pattern.local_blocks
        allowed[:, 0] = True
        for i in range(1, b):
            lo = max(0, i - j)
            allowed[i, lo:i] = True
        allowed = np.tril(allowed)
    # SELF_ONLY keeps just the diagonal.
    return BlockMask(pattern, allowed)


def _check_counts(tokens_per_block: list[int] | tuple[int, ...], n_blocks: int) -> np.ndarray:
    counts = np.asarray(tokens_per_block, dtype=np.int64)
    if counts.ndim != 1 or counts.shape[0] != n_blocks:
        raise ShapeError(f"expected {n_blocks} block lengths, got shape {counts.shape}")
    if (counts <= 0).any():
        raise ShapeError("block token counts must be positive")
    return counts


def count_allowed_token_pairs(mask: BlockMask, tokens_per_block) -> int:
    """Exact number of allowed (query, key) token pairs under the expanded mask.

    Within-block pairs are causal (t*(t+1)/2, the diagonal included); allowed
    cross-block pairs are full t_i * t_j.
    """
    counts = _check_counts(tokens_per_block, mask.n_blocks)
    total = int((counts * (counts + 1) // 2).sum())
    for i in range(mask.n_blocks):
        for j in range(i):
            if mask.allowed[i, j]:
                total += int(counts[i] * counts[j])
    return total


def count_causal_token_pairs(total_tokens: int) -> int:
    return total_tokens * (total_tokens + 1) // 2


def token_sparsity(mask: BlockMask, tokens_per_block) -> float:
    """1 - allowed pairs / dense-causal pairs, counted exactly."""
    counts = _check_counts(tokens_per_block, mask.n_blocks)
    total = int(counts.sum())
    return 1.0 - count_allowed_token_pairs(mask, counts) / count_causal_token_pairs(total)


def token_sparsity_vs_full(mask: BlockMask, tokens_per_block) -> float:
    """Alternate reading: 1 - allowed pairs / T^2 (within-block causal zeros count)."""
    counts = _check_counts(tokens_per_block, mask.n_blocks)
    total = int(counts.sum())
    return 1.0 - count_allowed_token_pairs(mask, counts) / (total * total)


def block_sparsity(mask: BlockMask) -> float:
    b = mask.n_blocks
    return 1.0 - mask.allowed_pairs() / (b * (b + 1) // 2)


def full_token_mask(mask: BlockMask, tokens_per_block) -> np.ndarray:
    """Dense (T, T) expansion of the block mask; used by oracles and tests."""
    counts = _check_counts(tokens_per_block, mask.n_blocks)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    total = int(offsets[-1])
    out = np.zeros((total, total), dtype=bool)
    for i in range(mask.n_blocks):
        ri = slice(offsets[i], offsets[i + 1])
        out[ri, ri] = np.tril(np.ones((counts[i], counts[i]), dtype=bool))
        for j in range(i):
            if mask.allowed[i, j]:
                out[ri, offsets[j]:offsets[j + 1]] = True
    return out


def block_mask_rows(mask: BlockMask, tokens_per_block, block_id: int) -> np.ndarray:
    """Token mask for encoding one block against its allowed context.

    Rows are the block's own tokens; columns are the concatenated context
    blocks (in `context_ids` order) followed by the block itself. Context
    columns are fully allowed, the self part is causal.
    """
    counts = _check_counts(tokens_per_block, mask.n_blocks)
    t = int(counts[block_id])
    ctx = sum(int(counts[j]) for j in mask.context_ids(block_id))
    rows = np.zeros((t, ctx + t), dtype=bool)
    rows[:, :ctx] = True
    rows[:, ctx:] = np.tril(np.ones((t, t), dtype=bool))
    return rows
