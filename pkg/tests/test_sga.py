"""SGA kernel vs oracle: hand cases, degeneracies, shared-softmax masses."""

import numpy as np
import pytest

from sgattn.core import ModelConfig, dense_mha, init_tokens
from sgattn.sga import (
    SgaPlan,
    build_plan,
    mean_kv_attention,
    run_verification,
    sga_attention,
    sga_oracle,
)
from sgattn.subsample import SubsampleSpec


def manual_plan(kept, dropped, M, *, diagonal, mean_fill, num_special=0, N=1, **kw):
    """Plan over a single frame of M rows without going through a TokenBatch."""
    mask = np.zeros(M, dtype=bool)
    mask[dropped] = True
    return SgaPlan(
        N=N,
        L=M // N,
        num_special=num_special,
        selections=[],
        kept_rows=np.asarray(kept, dtype=np.int64),
        dropped_rows=np.asarray(dropped, dtype=np.int64),
        dropped_mask=mask,
        diagonal=diagonal,
        mean_fill=mean_fill,
        **kw,
    )


def small_instance(seed=0, N=2, n_h=3, n_w=3, sigma=4, d=8, **spec_kw):
    cfg = ModelConfig(num_blocks=2, embed_dim=8, num_heads=1)
    batch = init_tokens(cfg, 1, N, n_h, n_w, seed=seed)
    spec = SubsampleSpec.from_sigma(sigma, **spec_kw)
    plan = build_plan(batch, spec)
    rng = np.random.default_rng(seed + 1)
    M = N * batch.L
    q, k, v = (rng.uniform(-2, 2, (M, d)).astype(np.float32) for _ in range(3))
    return plan, q, k, v


class TestHandCases:
    def test_one_kept_one_dropped_mean_fill(self):
        # Kept key (1,0), dropped key (-1,0); the mean pair IS the dropped key.
        # Query (1,0) sees logits (1/sqrt2, -1/sqrt2), so the shared softmax
        # gives weights (0.8044, 0.1956) to 4 decimals: sigmoid(sqrt2).
        q = np.array([[1.0, 0.0], [0.0, 0.0]], dtype=np.float32)
        k = np.array([[1.0, 0.0], [-1.0, 0.0]], dtype=np.float32)
        v = np.array([[1.0, 0.0], [0.0, 1.0]], dtype=np.float32)
        plan = manual_plan([0], [1], M=2, diagonal=False, mean_fill=True)
        out, stats = sga_attention(q, k, v, plan, return_stats=True)

        w_kept = 1.0 / (1.0 + np.exp(-np.sqrt(2.0)))  # 0.8044296825...
        assert round(float(stats.kept_mass[0]), 4) == 0.8044
        assert round(float(stats.mean_mass[0]), 4) == 0.1956
        np.testing.assert_allclose(out[0], [w_kept, 1 - w_kept], rtol=1e-6)
        np.testing.assert_allclose(out, sga_oracle(q, k, v, plan), rtol=1e-5)

    def test_equal_logits_uniform_weights(self):
        # All keys identical: kept (m=2), diagonal, and mean logits all tie, so
        # a dropped query spreads weight 1/(m+2) over each component.
        rng = np.random.default_rng(3)
        k = np.tile(rng.uniform(-1, 1, (1, 4)).astype(np.float32), (4, 1))
        v = rng.uniform(-1, 1, (4, 4)).astype(np.float32)
        q = rng.uniform(-1, 1, (4, 4)).astype(np.float32)
        plan = manual_plan([0, 1], [2, 3], M=4, diagonal=True, mean_fill=True)
        out, stats = sga_attention(q, k, v, plan, return_stats=True)
        i = 2  # dropped query
        np.testing.assert_allclose(stats.kept_mass[i], 0.5, atol=1e-6)
        np.testing.assert_allclose(stats.diag_mass[i], 0.25, atol=1e-6)
        np.testing.assert_allclose(stats.mean_mass[i], 0.25, atol=1e-6)
        v_bar = v[[2, 3]].mean(axis=0)
        expect = (v[0] + v[1] + v[i] + v_bar) / 4.0
        np.testing.assert_allclose(out[i], expect, rtol=1e-5)
        np.testing.assert_allclose(out, sga_oracle(q, k, v, plan), rtol=1e-5, atol=1e-7)


class TestDegeneracies:
    def test_sigma_one_equals_dense(self):
        plan, q, k, v = small_instance(sigma=1)
        assert plan.dropped_rows.size == 0
        out = sga_attention(q, k, v, plan)
        dense = dense_mha(q, k, v)
        rel = np.abs(out - dense).max() / np.abs(dense).max()
        assert rel < 1e-5

    def test_mean_fill_noop_without_dropped(self):
        _, q, k, v = small_instance(sigma=1)
        plan_on, _, _, _ = small_instance(sigma=1, mean_fill=True)
        plan_off, _, _, _ = small_instance(sigma=1, mean_fill=False)
        assert np.array_equal(sga_attention(q, k, v, plan_on), sga_attention(q, k, v, plan_off))

    def test_diagonal_noop_for_kept_queries(self):
        plan_on, q, k, v = small_instance(sigma=4, seed=7, diagonal=True)
        plan_off, _, _, _ = small_instance(sigma=4, seed=7, diagonal=False)
        out_on = sga_attention(q, k, v, plan_on)
        out_off = sga_attention(q, k, v, plan_off)
        kept = ~plan_on.dropped_mask
        assert np.array_equal(out_on[kept], out_off[kept])
        # and it is NOT a no-op for dropped queries
        assert not np.array_equal(out_on[plan_on.dropped_mask], out_off[plan_on.dropped_mask])

    def test_oracle_sigma_one_equals_dense64(self):
        plan, q, k, v = small_instance(sigma=1)
        out = sga_oracle(q, k, v, plan)
        dense = dense_mha(q.astype(np.float64), k.astype(np.float64), v.astype(np.float64))
        np.testing.assert_allclose(out, dense, atol=1e-12)

    def test_oracle_no_extras_is_column_masked_dense(self):
        plan, q, k, v = small_instance(sigma=4, diagonal=False, mean_fill=False)
        out = sga_oracle(q, k, v, plan)
        cols = plan.kept_rows
        dense = dense_mha(
            q.astype(np.float64), k[cols].astype(np.float64), v[cols].astype(np.float64)
        )
        np.testing.assert_allclose(out, dense, atol=1e-12)


class TestPlan:
    def test_specials_always_kept(self):
        plan, _, _, _ = small_instance(sigma=9)
        for f in range(plan.N):
            for s in range(plan.num_special):
                assert f * plan.L + s in plan.kept_rows

    def test_partition_of_rows(self):
        plan, _, _, _ = small_instance(sigma=6, keep_first_frame_full=False)
        all_rows = np.sort(np.concatenate([plan.kept_rows, plan.dropped_rows]))
        assert all_rows.tolist() == list(range(plan.num_rows))

    def test_first_frame_exemption(self):
        plan, _, _, _ = small_instance(sigma=9, keep_first_frame_full=True)
        assert plan.dropped_rows.min() >= plan.L  # nothing dropped in frame 0

    def test_fewer_columns_than_dense(self):
        plan, _, _, _ = small_instance(N=3, n_h=6, n_w=6, sigma=4, keep_first_frame_full=False)
        assert plan.num_kept_columns + 2 < plan.num_rows

    def test_mean_pool_synthesizes_by_window(self):
        plan, q, k, v = small_instance(
            N=2, n_h=4, n_w=4, sigma=4, strategy="mean_pool", keep_first_frame_full=False
        )
        assert len(plan.synth_groups) == 2 * 4  # 4 windows per frame
        np.testing.assert_allclose(
            sga_attention(q, k, v, plan), sga_oracle(q, k, v, plan), rtol=1e-4, atol=1e-6
        )


class TestMeanVariants:
    def test_per_frame_scope_matches_oracle_and_differs_from_global(self):
        plan_g, q, k, v = small_instance(N=3, sigma=4, seed=11, keep_first_frame_full=False)
        plan_f, _, _, _ = small_instance(
            N=3, sigma=4, seed=11, keep_first_frame_full=False, mean_scope="per_frame"
        )
        out_f = sga_attention(q, k, v, plan_f)
        np.testing.assert_allclose(out_f, sga_oracle(q, k, v, plan_f), rtol=1e-4, atol=1e-6)
        assert not np.allclose(out_f, sga_attention(q, k, v, plan_g), atol=1e-6)

    def test_count_weighted_matches_replicated_oracle(self):
        plan, q, k, v = small_instance(
            N=2, n_h=4, n_w=4, sigma=4, seed=13, keep_first_frame_full=False,
            count_weighted_mean=True,
        )
        out = sga_attention(q, k, v, plan)
        np.testing.assert_allclose(out, sga_oracle(q, k, v, plan), rtol=1e-4, atol=1e-6)


class TestValidation:
    def test_nan_rejected(self):
        plan, q, k, v = small_instance()
        q[0, 0] = np.nan
        with pytest.raises(ValueError, match="NaN"):
            sga_attention(q, k, v, plan)

    def test_shape_mismatch_rejected(self):
        plan, q, k, v = small_instance()
        with pytest.raises(ValueError, match="shape mismatch"):
            sga_attention(q, k[:-1], v[:-1], plan)

    def test_plan_row_mismatch_rejected(self):
        plan, q, k, v = small_instance()
        with pytest.raises(ValueError, match="plan covers"):
            sga_attention(q[:-2], k[:-2], v[:-2], plan)


class TestMeanKvAttention:
    def test_rows_equal_value_mean(self):
        rng = np.random.default_rng(0)
        q, k, v = (rng.uniform(-2, 2, (12, 6)).astype(np.float32) for _ in range(3))
        out = mean_kv_attention(q, k, v)
        np.testing.assert_allclose(out, np.tile(v.mean(axis=0), (12, 1)), atol=1e-6)

    def test_constant_values(self):
        q = np.random.default_rng(1).uniform(-1, 1, (5, 3)).astype(np.float32)
        v = np.full((7, 3), 2.5, dtype=np.float32)
        k = np.zeros((7, 3), dtype=np.float32)
        np.testing.assert_allclose(mean_kv_attention(q, k, v), 2.5, atol=0)

    def test_independent_of_query(self):
        rng = np.random.default_rng(2)
        k, v = (rng.uniform(-1, 1, (9, 4)).astype(np.float32) for _ in range(2))
        q1 = rng.uniform(-1, 1, (6, 4)).astype(np.float32)
        q2 = rng.uniform(-1, 1, (6, 4)).astype(np.float32)
        assert np.array_equal(mean_kv_attention(q1, k, v), mean_kv_attention(q2, k, v))

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="at least one"):
            mean_kv_attention(np.ones((2, 3)), np.ones((0, 3)), np.ones((0, 3)))


class TestVerificationSweep:
    def test_hundred_seeded_cases_pass(self):
        report = run_verification(cases=100, seed=0)
        assert report.ok, report.failures
        assert report.max_rel_err <= 1e-4
        assert report.max_mass_err <= 1e-6

    def test_masses_sum_to_one_from_accumulators(self):
        plan, q, k, v = small_instance(N=4, n_h=5, n_w=5, sigma=6, keep_first_frame_full=False)
        _, stats = sga_attention(q, k, v, plan, return_stats=True)
        np.testing.assert_allclose(stats.total_mass, 1.0, atol=1e-6)
        assert stats.diag_mass[plan.dropped_mask].min() > 0
        assert np.all(stats.diag_mass[~plan.dropped_mask] == 0)

    def test_injected_fault_detected(self):
        report = run_verification(cases=3, seed=0, inject_fault=True)
        assert report.failed >= 1

    def test_zero_tolerance_fails(self):
        # 32-bit kernel vs 64-bit oracle can never match exactly.
        report = run_verification(cases=5, seed=0, tolerance=0.0)
        assert report.failed >= 1
