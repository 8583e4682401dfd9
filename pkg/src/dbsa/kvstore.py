"""Segmented pre-rotation KV cache: append-only per-block storage, Stage-2
assembly (selection -> concatenation -> in-order re-positioning -> rotary
application), and on-disk serialization.

Keys are stored BEFORE the rotary transformation so a segment can be placed at
any new position later; values carry no position and are copied unmodified.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels, model
from .errors import CompatibilityError, FormatError, ShapeError, ValidationError

CACHE_MAGIC = b"DBSACACH"
CACHE_VERSION = 1

BLOCK_GRANULARITY = "block"
EXAMPLE_GRANULARITY = "example"
GRANULARITIES = (BLOCK_GRANULARITY, EXAMPLE_GRANULARITY)


@dataclass(frozen=True)
class BlockEntry:
    block_id: int
    token_count: int
    pos_start: int
    pos_end: int
    text_digest: bytes
    example_spans: tuple[tuple[int, int], ...]


class SegmentedKVCache:
    """Per-layer, per-block pre-rotation key/value segments.

    Append-only while building (single writer); `seal()` freezes it for
    concurrent read-only use. Original positions are sequential across blocks.
    """

    def __init__(self, config: model.ModelConfig):
        self.config = config
        self.config_hash = config.hash_bytes()
        self.blocks: list[BlockEntry] = []
        self._keys: list[list[np.ndarray]] = [[] for _ in range(config.n_layers)]
        self._values: list[list[np.ndarray]] = [[] for _ in range(config.n_layers)]
        self.sealed = False

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @property
    def total_tokens(self) -> int:
        return self.blocks[-1].pos_end if self.blocks else 0

    def segment(self, layer: int, block_id: int) -> model.LayerKV:
        return self._keys[layer][block_id], self._values[layer][block_id]

    def seal(self) -> "SegmentedKVCache":
        for per_layer in (self._keys, self._values):
            for segs in per_layer:
                for arr in segs:
                    arr.setflags(write=False)
        self.sealed = True
        return self

    def append_block(
        self,
        block_id: int,
        pre_rotation_kv: list[model.LayerKV],
        text_digest: bytes,
        example_spans: tuple[tuple[int, int], ...] = (),
    ) -> "SegmentedKVCache":
        """Append one block's pre-rotation KV. Positions continue sequentially."""
        if self.sealed:
            raise ValidationError("cache is sealed; cannot append")
        if block_id != self.n_blocks:
            raise ValidationError(
                f"block ids must be appended in order: expected {self.n_blocks}, got {block_id}"
            )
        if len(pre_rotation_kv) != self.config.n_layers:
            raise ShapeError(
                f"expected KV for {self.config.n_layers} layers, got {len(pre_rotation_kv)}"
            )
        if len(text_digest) != 32:
            raise ValidationError("text digest must be 32 bytes (SHA-256)")
        token_count = int(pre_rotation_kv[0][0].shape[0])
        want = (token_count, self.config.n_kv_heads, self.config.head_dim)
        for k, v in pre_rotation_kv:
            if k.shape != want or v.shape != want:
                raise ShapeError(f"KV segment shape {k.shape}/{v.shape}, expected {want}")
        spans = tuple((int(a), int(b)) for a, b in example_spans)
        for a, b in spans:
            if not 0 <= a < b <= token_count:
                raise ValidationError(f"example span ({a}, {b}) outside block of {token_count}")
        start = self.total_tokens
        self.blocks.append(
            BlockEntry(block_id, token_count, start, start + token_count, bytes(text_digest), spans)
        )
        for layer, (k, v) in enumerate(pre_rotation_kv):
            self._keys[layer].append(kernels.as_f32(k).copy())
            self._values[layer].append(kernels.as_f32(v).copy())
        return self


@dataclass(frozen=True)
class SegmentRef:
    """One selectable unit: a whole block or a demonstration's token span."""

    unit_id: int
    block_id: int
    start: int  # token offset within the block
    end: int  # exclusive
    score: float = 0.0

    def length(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class Selection:
    """Ordered subset of cache segments; the anchor block is always first."""

    granularity: str
    units: tuple[SegmentRef, ...]

    def __post_init__(self) -> None:
        if self.granularity not in GRANULARITIES:
            raise ValidationError(f"unknown granularity {self.granularity!r}")
        if not self.units:
            raise ValidationError("selection must be non-empty")
        ids = [u.unit_id for u in self.units]
        if len(set(ids)) != len(ids):
            raise ValidationError("selection unit ids must be distinct")
        anchor = self.units[0]
        if anchor.block_id != 0 or anchor.start != 0:
            raise ValidationError("selection must start with the anchor block segment")

    @property
    def unit_ids(self) -> tuple[int, ...]:
        return tuple(u.unit_id for u in self.units)

    def total_tokens(self) -> int:
        return sum(u.length() for u in self.units)


def all_blocks_selection(cache: SegmentedKVCache) -> Selection:
    units = tuple(
        SegmentRef(e.block_id, e.block_id, 0, e.token_count) for e in cache.blocks
    )
    return Selection(BLOCK_GRANULARITY, units)


@dataclass
class AssembledCache:
    """Contiguous, re-positioned, rotated realization of a selection.

    Keys equal rope_rotate(pre-rotation key, new position) for new positions
    0..T'-1; provenance maps each new position back to (block id, offset).
    """

    config_hash: bytes
    total_tokens: int
    layers: tuple[model.LayerKV, ...]
    provenance_blocks: np.ndarray
    provenance_offsets: np.ndarray
    selection: Selection | None = None

    @classmethod
    def empty(cls, config: model.ModelConfig) -> "AssembledCache":
        shape = (0, config.n_kv_heads, config.head_dim)
        z = np.zeros(shape, dtype=kernels.DTYPE)
        return cls(
            config.hash_bytes(),
            0,
            tuple((z, z) for _ in range(config.n_layers)),
            np.zeros(0, dtype=np.int64),
            np.zeros(0, dtype=np.int64),
        )

    def provenance(self, position: int) -> tuple[int, int]:
        return int(self.provenance_blocks[position]), int(self.provenance_offsets[position])


def assemble(cache: SegmentedKVCache, selection: Selection) -> AssembledCache:
    """Concatenate the selected segments in order and re-apply the rotary
    transformation at new in-order positions 0..T'-1."""
    n_blocks = cache.n_blocks
    for u in selection.units:
        if not 0 <= u.block_id < n_blocks:
            raise ValidationError(f"unknown block id {u.block_id}")
        entry = cache.blocks[u.block_id]
        if not 0 <= u.start < u.end <= entry.token_count:
            raise ValidationError(
                f"segment span ({u.start}, {u.end}) outside block {u.block_id} "
                f"of {entry.token_count} tokens"
            )
    total = selection.total_tokens()
    positions = np.arange(total, dtype=np.int64)
    prov_blocks = np.concatenate(
        [np.full(u.length(), u.block_id, dtype=np.int64) for u in selection.units]
    )
    prov_offsets = np.concatenate(
        [np.arange(u.start, u.end, dtype=np.int64) for u in selection.units]
    )
    layers: list[model.LayerKV] = []
    for layer in range(cache.config.n_layers):
        k_pre = np.concatenate(
            [cache.segment(layer, u.block_id)[0][u.start : u.end] for u in selection.units]
        )
        v = np.concatenate(
            [cache.segment(layer, u.block_id)[1][u.start : u.end] for u in selection.units]
        )
        k_rot = model.rope_rotate_heads(k_pre, positions, cache.config.rope_theta)
        layers.append((k_rot, v.copy()))
    return AssembledCache(
        cache.config_hash, total, tuple(layers), prov_blocks, prov_offsets, selection
    )


def storage_bytes(config: model.ModelConfig, n_tokens: int, bytes_per_value: int) -> int:
    """KV bytes for `n_tokens`: 2 (K and V) x layers x kv heads x head_dim x width."""
    if n_tokens < 0:
        raise ValidationError(f"n_tokens must be non-negative, got {n_tokens}")
    if bytes_per_value not in (2, 4):
        raise ValidationError(f"bytes_per_value must be 2 or 4, got {bytes_per_value}")
    return 2 * config.n_layers * config.n_kv_heads * config.head_dim * bytes_per_value * n_tokens


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def serialize(cache: SegmentedKVCache, path) -> None:
    import struct

    cfg = cache.config
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<I", CACHE_VERSION))
        fh.write(cache.config_hash)
        fh.write(struct.pack("<III", cfg.n_layers, cfg.n_kv_heads, cfg.head_dim))
        fh.write(struct.pack("<I", cache.n_blocks))
        for e in cache.blocks:
            fh.write(struct.pack("<IIQQ", e.block_id, e.token_count, e.pos_start, e.pos_end))
            fh.write(e.text_digest)
            fh.write(struct.pack("<I", len(e.example_spans)))
            for a, b in e.example_spans:
                fh.write(struct.pack("<II", a, b))
        for layer in range(cfg.n_layers):
            for block_id in range(cache.n_blocks):
                k, v = cache.segment(layer, block_id)
                fh.write(np.ascontiguousarray(k, dtype="<f4").tobytes())
                fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def deserialize(path, config: model.ModelConfig) -> SegmentedKVCache:
    import struct

    def read(fh, n: int, what: str) -> bytes:
        data = fh.read(n)
        if len(data) != n:
            raise FormatError(f"truncated cache file while reading {what}")
        return data

    with open(path, "rb") as fh:
        if read(fh, 8, "magic") != CACHE_MAGIC:
            raise FormatError("not a KV cache file (bad magic)")
        (version,) = struct.unpack("<I", read(fh, 4, "version"))
        if version != CACHE_VERSION:
            raise FormatError(f"unsupported cache file version {version}")
        stored_hash = read(fh, 32, "config hash")
        if stored_hash != config.hash_bytes():
            raise CompatibilityError("cache file was built for a different model config")
        n_layers, n_kv, hd = struct.unpack("<III", read(fh, 12, "dims"))
        if (n_layers, n_kv, hd) != (config.n_layers, config.n_kv_heads, config.head_dim):
            raise CompatibilityError("cache dims disagree with model config")
        (n_blocks,) = struct.unpack("<I", read(fh, 4, "block count"))
        entries: list[BlockEntry] = []
        for _ in range(n_blocks):
            bid, count, start, end = struct.unpack("<IIQQ", read(fh, 24, "block entry"))
            digest = read(fh, 32, "digest")
            (n_spans,) = struct.unpack("<I", read(fh, 4, "span count"))
            spans = tuple(
                struct.unpack("<II", read(fh, 8, "span")) for _ in range(n_spans)
            )
            entries.append(BlockEntry(bid, count, start, end, digest, spans))
        cache = SegmentedKVCache(config)
        segments: list[list[model.LayerKV]] = []
        for _ in range(n_layers):
            per_layer = []
            for e in entries:
                n_vals = e.token_count * n_kv * hd
                k = np.frombuffer(read(fh, 4 * n_vals, "keys"), dtype="<f4")
                v = np.frombuffer(read(fh, 4 * n_vals, "values"), dtype="<f4")
                per_layer.append(
                    (
                        k.reshape(e.token_count, n_kv, hd).astype(kernels.DTYPE),
                        v.reshape(e.token_count, n_kv, hd).astype(kernels.DTYPE),
                    )
                )
            segments.append(per_layer)
        if fh.read(1):
            raise FormatError("trailing bytes after final segment")
    for e in entries:
        cache.append_block(
            e.block_id,
            [segments[layer][e.block_id] for layer in range(n_layers)],
            e.text_digest,
            e.example_spans,
        )
    return cache.seal()


def expected_file_size(config: model.ModelConfig, token_counts, spans_per_block) -> int:
    """Size in bytes that `serialize` produces; used to validate the format."""
    header = 8 + 4 + 32 + 12 + 4
    table = sum(24 + 32 + 4 + 8 * s for s in spans_per_block)
    data = 2 * config.n_layers * config.n_kv_heads * config.head_dim * 4 * sum(token_counts)
    return header + table + data
