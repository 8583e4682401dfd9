"""Small decoder-only transformer: GQA attention with rotary embeddings,
RMS-norm, gated feed-forward, byte-level vocabulary.

The attention entry points are built for staged encoding: `forward_encode`
accepts externally supplied rotated context KV plus an arbitrary token-level
mask and returns its own keys/values BEFORE the rotary transformation, so they
can be cached once and re-positioned later. `forward_query` runs a query
against an assembled cache with full attention to it.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .errors import (
    CompatibilityError,
    ConfigError,
    FormatError,
    MaskError,
    ShapeError,
    ValidationError,
)

WEIGHT_MAGIC = b"DBSAMODL"
WEIGHT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    d_model: int
    n_layers: int
    n_heads: int
    n_kv_heads: int
    head_dim: int
    ffn_dim: int
    vocab_size: int
    rope_theta: float = 10000.0
    norm_eps: float = 1e-5
    max_seq_len: int = 32768

    def __post_init__(self) -> None:
        ints = {
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "n_kv_heads": self.n_kv_heads,
            "head_dim": self.head_dim,
            "ffn_dim": self.ffn_dim,
            "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len,
        }
        for name, value in ints.items():
            if int(value) <= 0:
                raise ConfigError(f"{name} must be positive, got {value}")
        if self.rope_theta <= 0 or self.norm_eps <= 0:
            raise ConfigError("rope_theta and norm_eps must be positive")
        if self.n_heads % self.n_kv_heads != 0:
            raise ConfigError(
                f"n_heads ({self.n_heads}) must be a multiple of n_kv_heads ({self.n_kv_heads})"
            )
        if self.d_model != self.n_heads * self.head_dim:
            raise ConfigError(
                f"d_model ({self.d_model}) must equal n_heads*head_dim "
                f"({self.n_heads}*{self.head_dim})"
            )
        if self.head_dim % 2 != 0:
            raise ConfigError(f"head_dim must be even for rotary embeddings, got {self.head_dim}")

    @property
    def group_size(self) -> int:
        return self.n_heads // self.n_kv_heads

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "n_kv_heads": self.n_kv_heads,
            "head_dim": self.head_dim,
            "ffn_dim": self.ffn_dim,
            "vocab_size": self.vocab_size,
            "rope_theta": self.rope_theta,
            "norm_eps": self.norm_eps,
            "max_seq_len": self.max_seq_len,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)

    def hash_bytes(self) -> bytes:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).digest()


def weight_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, h, kv, hd, f = (
        config.d_model,
        config.n_heads,
        config.n_kv_heads,
        config.head_dim,
        config.ffn_dim,
    )
    shapes: dict[str, tuple[int, ...]] = {
        "tok_embed": (config.vocab_size, d),
        "out_norm": (d,),
        "lm_head": (d, config.vocab_size),
    }
    for i in range(config.n_layers):
        shapes[f"layers.{i}.attn_norm"] = (d,)
        shapes[f"layers.{i}.wq"] = (d, h * hd)
        shapes[f"layers.{i}.wk"] = (d, kv * hd)
        shapes[f"layers.{i}.wv"] = (d, kv * hd)
        shapes[f"layers.{i}.wo"] = (h * hd, d)
        shapes[f"layers.{i}.ffn_norm"] = (d,)
        shapes[f"layers.{i}.w_gate"] = (d, f)
        shapes[f"layers.{i}.w_up"] = (d, f)
        shapes[f"layers.{i}.w_down"] = (f, d)
    return shapes


@dataclass
class ModelWeights:
    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def __post_init__(self) -> None:
        expected = weight_shapes(self.config)
        if set(self.tensors) != set(expected):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ShapeError(f"weight names mismatch: missing={missing} extra={extra}")
        for name, shape in expected.items():
            t = self.tensors[name]
            if t.shape != shape:
                raise ShapeError(f"tensor {name}: expected shape {shape}, got {t.shape}")
            if t.dtype != kernels.DTYPE:
                self.tensors[name] = t.astype(kernels.DTYPE)

    @property
    def config_hash(self) -> bytes:
        return self.config.hash_bytes()

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            h.update(name.encode("utf-8"))
            h.update(self.tensors[name].tobytes())
        return h.hexdigest()


def init_random(config: ModelConfig, seed: int) -> ModelWeights:
    """Deterministic scaled-uniform initialization for desk-scale fixtures."""
    rng = kernels.make_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in sorted(weight_shapes(config).items()):
        if name.endswith("norm"):
            tensors[name] = np.ones(shape, dtype=kernels.DTYPE)
        elif name == "tok_embed":
            tensors[name] = rng.uniform(-0.1, 0.1, size=shape).astype(kernels.DTYPE)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            tensors[name] = rng.uniform(-bound, bound, size=shape).astype(kernels.DTYPE)
    return ModelWeights(config, tensors)


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    positions: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.ids) != len(self.positions):
            raise ValidationError(
                f"ids ({len(self.ids)}) and positions ({len(self.positions)}) differ in length"
            )
        if len(self.ids) == 0:
            raise ValidationError("token sequence must be non-empty")
        if any(p < 0 for p in self.positions):
            raise ValidationError("positions must be non-negative")
        if any(b >= a for a, b in zip(self.positions[1:], self.positions)):
            raise ValidationError("positions must be strictly increasing")

    @classmethod
    def at_offset(cls, ids: Sequence[int], start: int) -> "TokenSequence":
        ids = tuple(int(i) for i in ids)
        return cls(ids, tuple(range(start, start + len(ids))))

    def __len__(self) -> int:
        return len(self.ids)


# ---------------------------------------------------------------------------
# Rotary position embeddings (paired-halves layout: pair (x_i, x_{i + hd/2}))
# ---------------------------------------------------------------------------


def rope_angles(positions: np.ndarray, head_dim: int, theta: float) -> tuple[np.ndarray, np.ndarray]:
    pos = np.asarray(positions, dtype=np.float64)
    freqs = theta ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = pos[:, None] * freqs[None, :]
    return np.cos(angles), np.sin(angles)


def rope_rotate(vec: np.ndarray, position: int, theta: float) -> np.ndarray:
    """Rotate one head_dim vector to `position`. Norm of each pair is preserved."""
    vec = kernels.as_f32(vec)
    if vec.ndim != 1:
        raise ShapeError(f"rope_rotate expects a 1-D vector, got shape {vec.shape}")
    if vec.shape[0] % 2 != 0:
        raise ConfigError(f"head_dim must be even for rotary embeddings, got {vec.shape[0]}")
    return rope_rotate_heads(vec[None, None, :], np.array([position]), theta)[0, 0]


def rope_rotate_heads(x: np.ndarray, positions: np.ndarray, theta: float) -> np.ndarray:
    """Rotate (T, n_heads, head_dim) float32 vectors at per-token positions."""
    x = kernels.as_f32(x)
    if x.ndim != 3:
        raise ShapeError(f"rope_rotate_heads expects (T, heads, head_dim), got {x.shape}")
    hd = x.shape[-1]
    if hd % 2 != 0:
        raise ConfigError(f"head_dim must be even for rotary embeddings, got {hd}")
    half = hd // 2
    cos, sin = rope_angles(positions, hd, theta)
    cos = cos[:, None, :]
    sin = sin[:, None, :]
    x64 = x.astype(np.float64)
    lo, hi = x64[..., :half], x64[..., half:]
    out = np.empty_like(x64)
    out[..., :half] = lo * cos - hi * sin
    out[..., half:] = lo * sin + hi * cos
    return out.astype(kernels.DTYPE)


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------

LayerKV = tuple[np.ndarray, np.ndarray]  # keys, values: (T, n_kv_heads, head_dim)


@dataclass
class ContextKV:
    """Rotated per-layer KV context fed into a forward pass.

    `positions` are the positions the keys were rotated at; they must all be
    smaller than the positions of the new tokens.
    """

    positions: np.ndarray
    layers: list[LayerKV] = field(default_factory=list)

    @classmethod
    def empty(cls, config: ModelConfig) -> "ContextKV":
        shape = (0, config.n_kv_heads, config.head_dim)
        z = np.zeros(shape, dtype=kernels.DTYPE)
        return cls(np.zeros(0, dtype=np.int64), [(z, z) for _ in range(config.n_layers)])

    def __len__(self) -> int:
        return int(self.positions.shape[0])


def _validate_context(config: ModelConfig, context: ContextKV) -> None:
    if len(context.layers) != config.n_layers:
        raise ShapeError(
            f"context has {len(context.layers)} layers, model has {config.n_layers}"
        )
    n = len(context)
    for k, v in context.layers:
        want = (n, config.n_kv_heads, config.head_dim)
        if k.shape != want or v.shape != want:
            raise ShapeError(f"context KV shape {k.shape}/{v.shape}, expected {want}")


def _forward(
    weights: ModelWeights,
    tokens: TokenSequence,
    context: ContextKV,
    token_mask: np.ndarray,
) -> tuple[list[LayerKV], np.ndarray]:
    """Shared transformer body. Returns per-layer pre-rotation KV of the new
    tokens and their final-layer hidden states (pre output-norm)."""
    cfg = weights.config
    ids = np.asarray(tokens.ids, dtype=np.int64)
    positions = np.asarray(tokens.positions, dtype=np.int64)
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ValidationError(f"token id outside vocabulary [0, {cfg.vocab_size})")
    if positions.max() >= cfg.max_seq_len:
        raise ValidationError(
            f"position {int(positions.max())} exceeds max_seq_len {cfg.max_seq_len}"
        )
    _validate_context(cfg, context)
    n_ctx = len(context)
    if n_ctx and int(context.positions.max()) >= int(positions.min()):
        raise ValidationError(
            "context positions overlap new token positions "
            f"(context max {int(context.positions.max())}, new min {int(positions.min())})"
        )
    t_new = len(tokens)
    mask = np.asarray(token_mask, dtype=bool)
    if mask.shape != (t_new, n_ctx + t_new):
        raise MaskError(
            f"token mask shape {mask.shape}, expected {(t_new, n_ctx + t_new)}"
        )
    if not mask.any(axis=1).all():
        raise MaskError("fully-masked query row in token mask")

    scale = 1.0 / np.sqrt(cfg.head_dim)
    h = weights.tensors["tok_embed"][ids]
    pre_kv: list[LayerKV] = []
    group_mask: np.ndarray | None = None
    for layer in range(cfg.n_layers):
        p = f"layers.{layer}."
        x = kernels.rms_norm(h, weights.tensors[p + "attn_norm"], cfg.norm_eps)
        q = kernels.matmul(x, weights.tensors[p + "wq"]).reshape(t_new, cfg.n_heads, cfg.head_dim)
        k = kernels.matmul(x, weights.tensors[p + "wk"]).reshape(t_new, cfg.n_kv_heads, cfg.head_dim)
        v = kernels.matmul(x, weights.tensors[p + "wv"]).reshape(t_new, cfg.n_kv_heads, cfg.head_dim)
        pre_kv.append((k.copy(), v.copy()))

        q_rot = rope_rotate_heads(q, positions, cfg.rope_theta)
        k_rot = rope_rotate_heads(k, positions, cfg.rope_theta)
        ctx_k, ctx_v = context.layers[layer]
        k_all = np.concatenate([ctx_k, k_rot], axis=0) if n_ctx else k_rot
        v_all = np.concatenate([ctx_v, v], axis=0) if n_ctx else v

        # query heads sharing a KV head are stacked into one GEMM per KV head
        gs = cfg.group_size
        if group_mask is None:
            group_mask = mask if gs == 1 else np.vstack([mask] * gs)
        heads_out = np.empty((t_new, cfg.n_heads, cfg.head_dim), dtype=kernels.DTYPE)
        for kv_head in range(cfg.n_kv_heads):
            head_slice = slice(kv_head * gs, (kv_head + 1) * gs)
            q_group = q_rot[:, head_slice, :].transpose(1, 0, 2).reshape(
                gs * t_new, cfg.head_dim
            )
            ctx_out = kernels.masked_attention(
                (q_group * scale).astype(kernels.DTYPE),
                k_all[:, kv_head, :],
                v_all[:, kv_head, :],
                group_mask,
            )
            heads_out[:, head_slice, :] = ctx_out.reshape(
                gs, t_new, cfg.head_dim
            ).transpose(1, 0, 2)
        attn_out = kernels.matmul(heads_out.reshape(t_new, -1), weights.tensors[p + "wo"])
        h = (h.astype(np.float64) + attn_out.astype(np.float64)).astype(kernels.DTYPE)

        x = kernels.rms_norm(h, weights.tensors[p + "ffn_norm"], cfg.norm_eps)
        gate = kernels.matmul(x, weights.tensors[p + "w_gate"])
        up = kernels.matmul(x, weights.tensors[p + "w_up"])
        ffn_out = kernels.matmul(kernels.silu_gate(gate, up), weights.tensors[p + "w_down"])
        h = (h.astype(np.float64) + ffn_out.astype(np.float64)).astype(kernels.DTYPE)
    return pre_kv, h


def forward_encode(
    weights: ModelWeights,
    tokens: TokenSequence,
    context: ContextKV | None,
    token_mask: np.ndarray,
) -> tuple[list[LayerKV], np.ndarray]:
    """Encode one block of tokens against its allowed (already rotated) context.

    Returns the block's keys BEFORE the rotary transformation (values are
    position-free by definition) and the final hidden states. Attention itself
    is computed with keys rotated at their recorded positions and queries at
    their own positions.
    """
    if context is None:
        context = ContextKV.empty(weights.config)
    return _forward(weights, tokens, context, token_mask)


def _query_mask(n_ctx: int, t_new: int) -> np.ndarray:
    mask = np.ones((t_new, n_ctx + t_new), dtype=bool)
    mask[:, n_ctx:] = np.tril(np.ones((t_new, t_new), dtype=bool))
    return mask


def _context_from_assembled(weights: ModelWeights, assembled) -> ContextKV:
    if assembled is None:
        return ContextKV.empty(weights.config)
    if assembled.config_hash != weights.config_hash:
        raise CompatibilityError("assembled cache was built for a different model config")
    return ContextKV(np.arange(assembled.total_tokens, dtype=np.int64), list(assembled.layers))


def logits_from_hidden(weights: ModelWeights, hidden: np.ndarray) -> np.ndarray:
    normed = kernels.rms_norm(hidden, weights.tensors["out_norm"], weights.config.norm_eps)
    return kernels.matmul(normed, weights.tensors["lm_head"])


def forward_query(weights: ModelWeights, assembled, query: TokenSequence) -> np.ndarray:
    """Next-token logits for every query position, with full attention to the
    assembled cache and causal attention within the query."""
    context = _context_from_assembled(weights, assembled)
    n_ctx = len(context)
    if query.positions[0] != n_ctx:
        raise ValidationError(
            f"query positions must start at the assembled length {n_ctx}, "
            f"got {query.positions[0]}"
        )
    _, hidden = _forward(weights, query, context, _query_mask(n_ctx, len(query)))
    return logits_from_hidden(weights, hidden)


def log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    x = logits.astype(np.float64)
    x = x - x.max(axis=1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=1, keepdims=True))


def score_label(
    weights: ModelWeights,
    assembled,
    query_ids: Sequence[int],
    label_ids: Sequence[int],
) -> float:
    """Sum of teacher-forced log-probabilities of the label tokens."""
    query_ids = [int(i) for i in query_ids]
    label_ids = [int(i) for i in label_ids]
    if not label_ids:
        raise ValidationError("label must be non-empty")
    if not query_ids:
        raise ValidationError("query must be non-empty")
    vocab = weights.config.vocab_size
    for tok in label_ids + query_ids:
        if not 0 <= tok < vocab:
            raise ValidationError(f"token id {tok} outside vocabulary [0, {vocab})")
    context = _context_from_assembled(weights, assembled)
    n_ctx = len(context)
    seq = TokenSequence.at_offset(query_ids + label_ids, n_ctx)
    _, hidden = _forward(weights, seq, context, _query_mask(n_ctx, len(seq)))
    logits = logits_from_hidden(weights, hidden)
    rows = log_softmax_rows(logits[len(query_ids) - 1 : len(seq) - 1])
    return float(rows[np.arange(len(label_ids)), label_ids].sum())


# ---------------------------------------------------------------------------
# Weight file I/O
# ---------------------------------------------------------------------------


def save_weights(weights: ModelWeights, path) -> None:
    config_blob = json.dumps(weights.config.to_dict(), sort_keys=True).encode("utf-8")
    names = sorted(weights.tensors)
    payload = bytearray()
    for name in names:
        t = np.ascontiguousarray(weights.tensors[name], dtype="<f4")
        nb = name.encode("utf-8")
        payload += struct.pack("<I", len(nb)) + nb
        payload += struct.pack("<I", t.ndim)
        payload += struct.pack(f"<{t.ndim}Q", *t.shape)
        payload += t.tobytes()
    digest = hashlib.sha256(payload).digest()
    with open(path, "wb") as fh:
        fh.write(WEIGHT_MAGIC)
        fh.write(struct.pack("<I", WEIGHT_VERSION))
        fh.write(struct.pack("<I", len(config_blob)))
        fh.write(config_blob)
        fh.write(digest)
        fh.write(struct.pack("<I", len(names)))
        fh.write(payload)


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated weight file while reading {what}")
    return data


def load_weights(path) -> ModelWeights:
    with open(path, "rb") as fh:
        if _read_exact(fh, 8, "magic") != WEIGHT_MAGIC:
            raise FormatError("not a model weight file (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != WEIGHT_VERSION:
            raise FormatError(f"unsupported weight file version {version}")
        (config_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        config = ModelConfig.from_dict(json.loads(_read_exact(fh, config_len, "config")))
        header_digest = _read_exact(fh, 32, "checksum")
        (n_tensors,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        payload = fh.read()
    if hashlib.sha256(payload).digest() != header_digest:
        raise FormatError("weight payload checksum mismatch")
    tensors: dict[str, np.ndarray] = {}
    offset = 0

    def take(n: int, what: str) -> bytes:
        nonlocal offset
        if offset + n > len(payload):
            raise FormatError(f"truncated weight file while reading {what}")
        chunk = payload[offset : offset + n]
        offset += n
        return chunk

    for _ in range(n_tensors):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, "dims"))
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(4 * count, f"tensor {name}"), dtype="<f4")
        tensors[name] = data.reshape(dims).astype(kernels.DTYPE)
    if offset != len(payload):
        raise FormatError("trailing bytes after final tensor")
    return ModelWeights(config, tensors)
