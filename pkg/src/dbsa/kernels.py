"""Dense numeric kernels and the seeded RNG shared by every other module.

All tensors are float32 ndarrays. Kernels upcast to float64 internally and
round once on output: float32 products are exact in float64, so results are
reproducible bit-for-bit across calls and agree with straight-line reference
implementations to the final rounding.
"""

from __future__ import annotations

import numpy as np

from .errors import MaskError, ShapeError

DTYPE = np.float32


def as_f32(x: np.ndarray) -> np.ndarray:
    arr = np.asarray(x)
    if arr.dtype != DTYPE:
        arr = arr.astype(DTYPE)
    return arr


def _check_finite(out: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(out).all():
        raise ShapeError(f"{op}: non-finite values in output")
    return out


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of two 2-D float32 tensors, accumulated in float64."""
    a = as_f32(a)
    b = as_f32(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    out = (a.astype(np.float64) @ b.astype(np.float64)).astype(DTYPE)
    return _check_finite(out, "matmul")


def _softmax64(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """In-place row softmax of a float64 matrix over the allowed entries.

    Max-subtraction for stability; masked entries are never evaluated and end
    up exactly 0.
    """
    if not mask.any(axis=1).all():
        bad = int(np.flatnonzero(~mask.any(axis=1))[0])
        raise MaskError(f"masked softmax: row {bad} has no allowed entries")
    row_max = np.max(x, axis=1, keepdims=True, where=mask, initial=-np.inf)
    np.subtract(x, row_max, out=x)
    e = np.zeros_like(x)
    np.exp(x, out=e, where=mask)
    np.divide(e, e.sum(axis=1, keepdims=True), out=e)
    return e


def softmax_masked(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row softmax over the allowed entries of `mask`; masked entries are exactly 0.

    A row with no allowed entry signals a malformed mask and raises.
    """
    scores = as_f32(scores)
    mask = np.asarray(mask, dtype=bool)
    if scores.shape != mask.shape or scores.ndim != 2:
        raise ShapeError(f"softmax_masked shapes differ: {scores.shape} vs {mask.shape}")
    out = _softmax64(scores.astype(np.float64), mask).astype(DTYPE)
    return _check_finite(out, "softmax_masked")


def masked_attention(
    q_scaled: np.ndarray, k: np.ndarray, v: np.ndarray, mask: np.ndarray
) -> np.ndarray:
    """softmax_masked(matmul(q_scaled, k.T), mask) @ v with the float64 score
    matrix carried straight through (the intermediate float32 roundings of the
    composed form are elided, so this is the same computation at slightly
    higher precision and far less memory traffic).
    """
    q_scaled = as_f32(q_scaled)
    k = as_f32(k)
    v = as_f32(v)
    mask = np.asarray(mask, dtype=bool)
    if q_scaled.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError("masked_attention expects 2-D q, k, v")
    if q_scaled.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ShapeError(
            f"masked_attention shapes incompatible: q {q_scaled.shape}, "
            f"k {k.shape}, v {v.shape}"
        )
    if mask.shape != (q_scaled.shape[0], k.shape[0]):
        raise ShapeError(
            f"masked_attention mask {mask.shape} does not match "
            f"{(q_scaled.shape[0], k.shape[0])}"
        )
    scores = q_scaled.astype(np.float64) @ k.astype(np.float64).T
    weights = _softmax64(scores, mask)
    out = (weights @ v.astype(np.float64)).astype(DTYPE)
    return _check_finite(out, "masked_attention")


def rms_norm(x: np.ndarray, weight: np.ndarray, eps: float) -> np.ndarray:
    """Root-mean-square normalization over the last axis, scaled by `weight`."""
    x = as_f32(x)
    weight = as_f32(weight)
    if x.shape[-1] != weight.shape[-1] or weight.ndim != 1:
        raise ShapeError(f"rms_norm: weight {weight.shape} does not match input {x.shape}")
    x64 = x.astype(np.float64)
    inv = 1.0 / np.sqrt((x64 * x64).mean(axis=-1, keepdims=True) + eps)
    out = (x64 * inv * weight.astype(np.float64)).astype(DTYPE)
    return _check_finite(out, "rms_norm")


def silu_gate(gate: np.ndarray, up: np.ndarray) -> np.ndarray:
    """Elementwise gated activation: silu(gate) * up."""
    gate = as_f32(gate)
    up = as_f32(up)
    if gate.shape != up.shape:
        raise ShapeError(f"silu_gate shapes differ: {gate.shape} vs {up.shape}")
    g = gate.astype(np.float64)
    out = (g / (1.0 + np.exp(-g)) * up.astype(np.float64)).astype(DTYPE)
    return _check_finite(out, "silu_gate")


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic counter-based generator; identical seed, identical stream."""
    if not 0 <= int(seed) < 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.Philox(int(seed)))
