"""Core primitives: config validation, deterministic weights, dense attention."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sgattn.core import (
    ModelConfig,
    TokenBatch,
    dense_mha,
    init_tokens,
    make_model,
    patch_row_indices,
    sinusoidal_grid_embedding,
)


def rand(shape, seed, lo=-3.0, hi=3.0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    return rng.uniform(lo, hi, size=shape).astype(dtype)


class TestModelConfig:
    def test_default_block_counts(self):
        assert ModelConfig(mode="vggt").num_blocks == 48
        assert ModelConfig(mode="pi3").num_blocks == 36

    def test_global_block_count_and_positions(self):
        cfg = ModelConfig(mode="vggt")
        assert cfg.num_global == 24
        globals_ = [i for i in range(cfg.num_blocks) if cfg.is_global_block(i)]
        assert globals_ == list(range(1, 48, 2))

    def test_frame_first_flip(self):
        cfg = ModelConfig(frame_first=False, num_blocks=4)
        assert cfg.is_global_block(0) and not cfg.is_global_block(1)

    def test_heads_must_divide_embed_dim(self):
        with pytest.raises(ValueError, match="num_heads must divide embed_dim"):
            ModelConfig(embed_dim=64, num_heads=5)

    def test_odd_block_count_rejected(self):
        with pytest.raises(ValueError, match="num_blocks"):
            ModelConfig(num_blocks=7)

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError, match="mode"):
            ModelConfig(mode="dino")


class TestMakeModel:
    def test_same_seed_bit_identical(self):
        cfg = ModelConfig(seed=7, num_blocks=4, embed_dim=32, num_heads=4)
        m1, m2 = make_model(cfg), make_model(cfg)
        for b1, b2 in zip(m1.blocks, m2.blocks):
            for name in ("wq", "wk", "wv", "wo", "mlp_w1", "mlp_w2"):
                assert np.array_equal(getattr(b1, name), getattr(b2, name))
        assert np.array_equal(m1.special_tokens, m2.special_tokens)

    def test_different_seeds_differ(self):
        a = make_model(ModelConfig(seed=1, num_blocks=2))
        b = make_model(ModelConfig(seed=2, num_blocks=2))
        assert not np.array_equal(a.blocks[0].wq, b.blocks[0].wq)

    def test_blocks_have_distinct_weights(self):
        m = make_model(ModelConfig(seed=0, num_blocks=4))
        assert not np.array_equal(m.blocks[0].wq, m.blocks[1].wq)
        assert not np.array_equal(m.blocks[0].wq, m.blocks[0].wk)

    def test_shapes(self):
        cfg = ModelConfig(num_blocks=2, embed_dim=32, num_heads=2, mlp_ratio=2.0)
        m = make_model(cfg)
        blk = m.blocks[0]
        assert blk.wq.shape == (32, 32)
        assert blk.mlp_w1.shape == (32, 64)
        assert blk.mlp_w2.shape == (64, 32)

    def test_init_bound(self):
        cfg = ModelConfig(num_blocks=2, embed_dim=64, num_heads=4)
        m = make_model(cfg)
        bound = 1.0 / np.sqrt(64)
        assert np.abs(m.blocks[0].wq).max() <= bound


class TestInitTokens:
    def test_token_count(self):
        cfg = ModelConfig(num_blocks=2, embed_dim=32, num_heads=2)
        batch = init_tokens(cfg, B=1, N=2, n_h=2, n_w=2, seed=0)
        assert batch.L == 9  # 4 patches + 5 specials

    def test_same_seed_identical(self):
        cfg = ModelConfig(num_blocks=2, embed_dim=32, num_heads=2)
        a = init_tokens(cfg, 1, 2, 3, 3, seed=11)
        b = init_tokens(cfg, 1, 2, 3, 3, seed=11)
        assert np.array_equal(a.data, b.data)

    def test_vggt_reference_frame_specials_differ(self):
        cfg = ModelConfig(mode="vggt", num_blocks=2, embed_dim=32, num_heads=2)
        batch = init_tokens(cfg, 1, 3, 2, 2, seed=0)
        s0 = batch.data[0, 0, :5]
        s1 = batch.data[0, 1, :5]
        s2 = batch.data[0, 2, :5]
        assert not np.array_equal(s0, s1)
        assert np.array_equal(s1, s2)

    def test_pi3_specials_shared(self):
        cfg = ModelConfig(mode="pi3", num_blocks=2, embed_dim=32, num_heads=2)
        batch = init_tokens(cfg, 1, 3, 2, 2, seed=0)
        assert np.array_equal(batch.data[0, 0, :5], batch.data[0, 1, :5])

    def test_bad_sizes_rejected(self):
        cfg = ModelConfig(num_blocks=2, embed_dim=32, num_heads=2)
        with pytest.raises(ValueError):
            init_tokens(cfg, 0, 2, 2, 2, seed=0)


class TestTokenBatch:
    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError, match="n_h\\*n_w"):
            TokenBatch(np.zeros((1, 1, 8, 4), dtype=np.float32), 2, 2, 5, "vggt")

    def test_nan_rejected(self):
        data = np.zeros((1, 1, 9, 4), dtype=np.float32)
        data[0, 0, 3, 1] = np.nan
        with pytest.raises(ValueError, match="NaN"):
            TokenBatch(data, 2, 2, 5, "vggt")

    def test_patch_row_indices(self):
        # N=2, L=4, one special: patches occupy rows 1..3 and 5..7
        assert patch_row_indices(2, 4, 1).tolist() == [1, 2, 3, 5, 6, 7]


class TestSinusoidalEmbedding:
    def test_shape_and_distinct_positions(self):
        emb = sinusoidal_grid_embedding(3, 4, 16)
        assert emb.shape == (12, 16)
        assert not np.array_equal(emb[0], emb[5])

    def test_remainder_channels_zero(self):
        emb = sinusoidal_grid_embedding(2, 2, 10)  # 10 % 4 == 2
        assert np.all(emb[:, 8:] == 0.0)


class TestDenseMha:
    def test_single_key_returns_value(self):
        q = rand((5, 3), seed=0)
        k = rand((1, 3), seed=1)
        v = rand((1, 3), seed=2)
        out = dense_mha(q, k, v)
        np.testing.assert_allclose(out, np.repeat(v, 5, axis=0), rtol=0, atol=1e-7)

    def test_orthogonal_query_gives_mean_value(self):
        # q is zero, so every logit is zero and the softmax is uniform.
        q = np.zeros((2, 4), dtype=np.float64)
        k = rand((6, 4), seed=3, dtype=np.float64)
        v = rand((6, 4), seed=4, dtype=np.float64)
        out = dense_mha(q, k, v)
        np.testing.assert_allclose(out, np.tile(v.mean(axis=0), (2, 1)), atol=1e-12)

    def test_hand_softmax_d1(self):
        # logits (ln 3, 0) give weights (3/4, 1/4), so the output is 0.75.
        q = np.array([[1.0]])
        k = np.array([[np.log(3.0)], [0.0]])
        v = np.array([[1.0], [0.0]])
        np.testing.assert_allclose(dense_mha(q, k, v), [[0.75]], atol=1e-12)

    def test_weights_sum_to_one(self):
        # With V = all-ones columns the output equals the weight row sums.
        q = rand((40, 8), seed=5)
        k = rand((30, 8), seed=6)
        v = np.ones((30, 2), dtype=np.float32)
        np.testing.assert_allclose(dense_mha(q, k, v), 1.0, atol=1e-6)

    def test_key_permutation_invariance(self):
        q = rand((10, 6), seed=7)
        k = rand((20, 6), seed=8)
        v = rand((20, 6), seed=9)
        perm = np.random.default_rng(10).permutation(20)
        np.testing.assert_allclose(
            dense_mha(q, k, v), dense_mha(q, k[perm], v[perm]), rtol=0, atol=1e-6
        )

    def test_32bit_agrees_with_64bit(self):
        q = rand((25, 8), seed=11)
        k = rand((25, 8), seed=12)
        v = rand((25, 8), seed=13)
        out32 = dense_mha(q, k, v)
        out64 = dense_mha(q.astype(np.float64), k.astype(np.float64), v.astype(np.float64))
        assert out32.dtype == np.float32 and out64.dtype == np.float64
        rel = np.abs(out32 - out64).max() / np.abs(out64).max()
        assert rel < 1e-4

    def test_deterministic_across_calls(self):
        q, k, v = rand((9, 4), 14), rand((7, 4), 15), rand((7, 4), 16)
        assert np.array_equal(dense_mha(q, k, v), dense_mha(q, k, v))

    def test_empty_key_set(self):
        with pytest.raises(ValueError, match="empty key set"):
            dense_mha(np.ones((2, 3)), np.ones((0, 3)), np.ones((0, 3)))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            dense_mha(np.ones((2, 3)), np.ones((4, 2)), np.ones((4, 2)))


@settings(max_examples=50, deadline=None)
@given(
    mq=st.integers(1, 12),
    mk=st.integers(1, 12),
    d=st.integers(1, 8),
    seed=st.integers(0, 2**32 - 1),
)
def test_property_weights_normalized(mq, mk, d, seed):
    rng = np.random.default_rng(seed)
    q = rng.uniform(-3, 3, (mq, d)).astype(np.float32)
    k = rng.uniform(-3, 3, (mk, d)).astype(np.float32)
    v = np.ones((mk, 1), dtype=np.float32)
    np.testing.assert_allclose(dense_mha(q, k, v), 1.0, atol=1e-6)
