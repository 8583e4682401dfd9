import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dbsa import kernels
from dbsa.errors import MaskError, ShapeError

from oracles import matmul_loop, softmax_row_reference


def rand(shape, seed, lo=-10.0, hi=10.0):
    return kernels.make_rng(seed).uniform(lo, hi, size=shape).astype(np.float32)


class TestMatmul:
    def test_identity(self):
        a = rand((3, 3), 1)
        np.testing.assert_array_equal(kernels.matmul(np.eye(3, dtype=np.float32), a), a)

    def test_zeros(self):
        a = rand((4, 5), 2)
        z = np.zeros((5, 3), dtype=np.float32)
        np.testing.assert_array_equal(kernels.matmul(a, z), np.zeros((4, 3), np.float32))

    def test_matches_triple_loop_oracle(self):
        a = rand((4, 5), 3)
        b = rand((5, 3), 4)
        got = kernels.matmul(a, b)
        want = matmul_loop(a, b)
        assert np.abs(got - want).max() <= 1e-6

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            kernels.matmul(rand((2, 3), 5), rand((4, 2), 6))

    def test_pure_bit_identical(self):
        a, b = rand((6, 7), 7), rand((7, 2), 8)
        first = kernels.matmul(a, b)
        for _ in range(3):
            np.testing.assert_array_equal(kernels.matmul(a, b), first)

    @given(
        m=st.integers(1, 6),
        k=st.integers(1, 8),
        n=st.integers(1, 6),
        seed=st.integers(0, 2**32 - 1),
    )
    @settings(max_examples=40, deadline=None)
    def test_agrees_with_oracle_property(self, m, k, n, seed):
        rng = kernels.make_rng(seed)
        a = rng.uniform(-10, 10, size=(m, k)).astype(np.float32)
        b = rng.uniform(-10, 10, size=(k, n)).astype(np.float32)
        assert np.abs(kernels.matmul(a, b) - matmul_loop(a, b)).max() <= 1e-6


class TestSoftmaxMasked:
    def test_single_allowed_entry_is_one(self):
        scores = rand((3, 4), 9)
        mask = np.zeros((3, 4), dtype=bool)
        mask[0, 2] = mask[1, 0] = mask[2, 3] = True
        out = kernels.softmax_masked(scores, mask)
        assert out[0, 2] == 1.0 and out[1, 0] == 1.0 and out[2, 3] == 1.0
        assert out.sum() == 3.0

    def test_uniform_scores_uniform_weights(self):
        scores = np.full((2, 5), 1.7, dtype=np.float32)
        out = kernels.softmax_masked(scores, np.ones((2, 5), dtype=bool))
        np.testing.assert_allclose(out, 0.2, atol=1e-7)

    def test_matches_exp_sum_reference(self):
        scores = rand((1, 8), 10)
        out = kernels.softmax_masked(scores, np.ones((1, 8), dtype=bool))
        np.testing.assert_allclose(out[0], softmax_row_reference(scores[0]), atol=1e-6)

    def test_fully_masked_row_raises(self):
        mask = np.ones((2, 3), dtype=bool)
        mask[1] = False
        with pytest.raises(MaskError):
            kernels.softmax_masked(rand((2, 3), 11), mask)

    @given(rows=st.integers(1, 5), cols=st.integers(1, 9), seed=st.integers(0, 2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_rows_are_probability_vectors(self, rows, cols, seed):
        rng = kernels.make_rng(seed)
        scores = rng.uniform(-30, 30, size=(rows, cols)).astype(np.float32)
        mask = rng.uniform(size=(rows, cols)) < 0.5
        mask[np.arange(rows), rng.integers(cols, size=rows)] = True
        out = kernels.softmax_masked(scores, mask)
        assert np.all(out[~mask] == 0.0)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)
        assert (out >= 0).all()


class TestMaskedAttention:
    @given(
        m=st.integers(1, 6),
        n=st.integers(1, 10),
        d=st.integers(1, 8),
        seed=st.integers(0, 2**32 - 1),
    )
    @settings(max_examples=40, deadline=None)
    def test_matches_composed_kernels(self, m, n, d, seed):
        rng = kernels.make_rng(seed)
        q = rng.uniform(-2, 2, size=(m, d)).astype(np.float32)
        k = rng.uniform(-2, 2, size=(n, d)).astype(np.float32)
        v = rng.uniform(-2, 2, size=(n, d)).astype(np.float32)
        mask = rng.uniform(size=(m, n)) < 0.6
        mask[np.arange(m), rng.integers(n, size=m)] = True
        fused = kernels.masked_attention(q, k, v, mask)
        composed = kernels.matmul(
            kernels.softmax_masked(kernels.matmul(q, k.T), mask), v
        )
        assert np.abs(fused - composed).max() < 1e-6

    def test_fully_masked_row_raises(self):
        q = np.ones((2, 4), dtype=np.float32)
        kv = np.ones((3, 4), dtype=np.float32)
        mask = np.ones((2, 3), dtype=bool)
        mask[0] = False
        with pytest.raises(MaskError):
            kernels.masked_attention(q, kv, kv, mask)

    def test_shape_validation(self):
        q = np.ones((2, 4), dtype=np.float32)
        kv = np.ones((3, 5), dtype=np.float32)
        with pytest.raises(ShapeError):
            kernels.masked_attention(q, kv, kv, np.ones((2, 3), dtype=bool))


class TestOtherKernels:
    def test_rms_norm_unit_rows(self):
        x = rand((4, 16), 12, -1, 1)
        out = kernels.rms_norm(x, np.ones(16, dtype=np.float32), 0.0)
        rms = np.sqrt((out.astype(np.float64) ** 2).mean(axis=1))
        np.testing.assert_allclose(rms, 1.0, atol=1e-5)

    def test_rms_norm_scales_by_weight(self):
        x = rand((2, 8), 13, -1, 1)
        w = rand((8,), 14, 0.5, 2.0)
        base = kernels.rms_norm(x, np.ones(8, dtype=np.float32), 1e-5)
        scaled = kernels.rms_norm(x, w, 1e-5)
        np.testing.assert_allclose(scaled, base * w, atol=1e-6)

    def test_silu_gate_reference(self):
        g = rand((3, 4), 15, -5, 5)
        u = rand((3, 4), 16, -5, 5)
        want = g.astype(np.float64) / (1 + np.exp(-g.astype(np.float64))) * u
        np.testing.assert_allclose(kernels.silu_gate(g, u), want, atol=1e-6)

    def test_rng_same_seed_same_stream(self):
        a = kernels.make_rng(123).uniform(size=100)
        b = kernels.make_rng(123).uniform(size=100)
        np.testing.assert_array_equal(a, b)

    def test_rng_different_seeds_differ(self):
        a = kernels.make_rng(1).uniform(size=100)
        b = kernels.make_rng(2).uniform(size=100)
        assert not np.array_equal(a, b)

    def test_rng_rejects_bad_seed(self):
        with pytest.raises(ValueError):
            kernels.make_rng(-1)
        with pytest.raises(ValueError):
            kernels.make_rng(2**64)
