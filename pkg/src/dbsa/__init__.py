"""Dynamic block-sparse attention engine for retrieval-based many-shot ICL.

Stage 1 encodes a demonstration pool once under a structured block-sparse
attention pattern, caching per-block KV segments before the rotary position
transformation. Stage 2 retrieves relevant segments per query, concatenates
them with new in-order positions, and scores the label set against the
assembled cache.
"""

from .errors import (
    CompatibilityError,
    ConfigError,
    DbsaError,
    FormatError,
    MaskError,
    ShapeError,
    ValidationError,
)
from .kvstore import (
    AssembledCache,
    SegmentedKVCache,
    SegmentRef,
    Selection,
    assemble,
    deserialize,
    serialize,
    storage_bytes,
)
from .masks import AttentionPattern, BlockMask, build_block_mask, token_sparsity
from .metrics import Metrics, QueryMetrics, flops_attention
from .model import (
    ModelConfig,
    ModelWeights,
    TokenSequence,
    forward_encode,
    forward_query,
    init_random,
    load_weights,
    rope_rotate,
    save_weights,
    score_label,
)
from .pipeline import (
    Demonstration,
    MethodConfig,
    PromptTemplate,
    Runner,
    TaskSpec,
    encode_pool,
    infer,
    run_ablation,
)
from .retrieval import (
    Bm25Index,
    BlockPartition,
    GroupingStrategy,
    bm25_score,
    bm25_tokenize,
    group,
    order,
    select,
)

__version__ = "0.1.0"

__all__ = [
    "AssembledCache",
    "AttentionPattern",
    "BlockMask",
    "BlockPartition",
    "Bm25Index",
    "CompatibilityError",
    "ConfigError",
    "DbsaError",
    "Demonstration",
    "FormatError",
    "GroupingStrategy",
    "MaskError",
    "Metrics",
    "MethodConfig",
    "ModelConfig",
    "ModelWeights",
    "PromptTemplate",
    "QueryMetrics",
    "Runner",
    "SegmentRef",
    "SegmentedKVCache",
    "Selection",
    "ShapeError",
    "TaskSpec",
    "TokenSequence",
    "ValidationError",
    "assemble",
    "bm25_score",
    "bm25_tokenize",
    "build_block_mask",
    "deserialize",
    "encode_pool",
    "flops_attention",
    "forward_encode",
    "forward_query",
    "group",
    "infer",
    "init_random",
    "load_weights",
    "order",
    "rope_rotate",
    "run_ablation",
    "save_weights",
    "score_label",
    "select",
    "serialize",
    "storage_bytes",
    "token_sparsity",
]
