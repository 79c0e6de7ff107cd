"""Schedule construction and forward-pass equivalences."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sgattn.aggregator import (
    DENSE_GLOBAL,
    FRAME_CONVERTED,
    MEAN_KV,
    SUBSAMPLED,
    LayerMode,
    LayerSchedule,
    build_schedule,
    dense_schedule,
    describe_schedule,
    forward,
    frame_attention_block,
    global_attention_block,
)
from sgattn.core import ModelConfig, init_tokens, make_model
from sgattn.subsample import SubsampleSpec


def small_setup(mode="vggt", num_blocks=4, C=16, H=2, N=3, n_h=3, n_w=3, ns=2, seed=0, B=1):
    cfg = ModelConfig(
        mode=mode, num_blocks=num_blocks, embed_dim=C, num_heads=H, num_special=ns, seed=seed
    )
    model = make_model(cfg)
    batch = init_tokens(cfg, B, N, n_h, n_w, seed=seed + 1)
    return cfg, model, batch


def rel_err(a, b):
    return np.abs(a - b).max() / (np.abs(b).max() + 1e-30)


class TestBuildSchedule:
    def test_vggt_default_split(self):
        s = build_schedule(24, 9, 23, 2)
        assert [m.kind for m in s.modes[:9]] == [FRAME_CONVERTED] * 9
        assert [m.kind for m in s.modes[9:]] == [SUBSAMPLED] * 15
        assert all(m.spec.sigma == 2 for m in s.modes[9:])

    def test_pi3_default_split(self):
        s = build_schedule(18, 10, 17, 4)
        assert [m.kind for m in s.modes] == [FRAME_CONVERTED] * 10 + [SUBSAMPLED] * 8

    def test_tail_ablation(self):
        s = build_schedule(24, 9, 19, 2)
        assert [m.kind for m in s.modes[20:]] == [FRAME_CONVERTED] * 4
        assert s.modes[19].kind == SUBSAMPLED

    def test_sigma_one_everywhere(self):
        s = build_schedule(24, 0, 23, 1)
        assert all(m.kind == SUBSAMPLED and m.spec.sigma == 1 for m in s.modes)

    @pytest.mark.parametrize(
        "args",
        [(24, 10, 9, 2), (24, -1, 23, 2), (24, 9, 24, 2), (0, 0, 0, 2), (24, 25, 25, 2)],
    )
    def test_invalid_arguments(self, args):
        with pytest.raises(ValueError):
            build_schedule(*args)

    def test_spec_overrides(self):
        s = build_schedule(
            8, 2, 7, 4,
            spec_overrides={"strategy": "random", "mean_fill": False, "keep_first_frame_full": False},
        )
        spec = s.modes[2].spec
        assert spec.strategy == "random" and not spec.mean_fill
        assert not spec.keep_first_frame_full and spec.diagonal

    def test_mean_kv_early_mode(self):
        s = build_schedule(8, 3, 7, 2, early_mode="mean_kv")
        assert [m.kind for m in s.modes[:3]] == [MEAN_KV] * 3
        assert s.modes[3].kind == SUBSAMPLED

    def test_roundtrip_serialization(self):
        s = build_schedule(18, 10, 15, 9, spec_overrides={"diagonal": False})
        s2 = LayerSchedule.from_dict(s.to_dict())
        assert s2 == s

    def test_dense_schedule(self):
        s = dense_schedule(6)
        assert all(m.kind == DENSE_GLOBAL for m in s.modes)
        assert len(describe_schedule(s)) == 6

    def test_mode_validation(self):
        with pytest.raises(ValueError, match="unknown layer mode"):
            LayerMode("full")
        with pytest.raises(ValueError, match="SubsampleSpec"):
            LayerMode(SUBSAMPLED)
        with pytest.raises(ValueError, match="SubsampleSpec"):
            LayerMode(DENSE_GLOBAL, SubsampleSpec.from_sigma(2))

    @settings(max_examples=50, deadline=None)
    @given(st.data())
    def test_every_layer_has_exactly_one_mode(self, data):
        num_global = data.draw(st.integers(1, 30))
        t_early = data.draw(st.integers(0, num_global - 1))
        t_end = data.draw(st.integers(t_early, num_global - 1))
        s = build_schedule(num_global, t_early, t_end, 2)
        assert len(s.modes) == num_global
        for i, m in enumerate(s.modes):
            if i < t_early:
                assert m.kind == FRAME_CONVERTED
            elif i <= t_end:
                assert m.kind == SUBSAMPLED
            else:
                assert m.kind == FRAME_CONVERTED


class TestFrameBlock:
    def test_frame_isolation_bitwise(self):
        cfg, model, batch = small_setup(N=3)
        out = frame_attention_block(batch, model.blocks[0], cfg.num_heads)
        bumped = batch.data.copy()
        bumped[0, 2] += 0.25  # perturb frame 2 only
        out2 = frame_attention_block(batch.replace_data(bumped), model.blocks[0], cfg.num_heads)
        assert np.array_equal(out.data[0, 0], out2.data[0, 0])
        assert np.array_equal(out.data[0, 1], out2.data[0, 1])
        assert not np.array_equal(out.data[0, 2], out2.data[0, 2])

    def test_single_frame_equals_global(self):
        cfg, model, batch = small_setup(N=1)
        a = frame_attention_block(batch, model.blocks[0], cfg.num_heads)
        b = global_attention_block(batch, model.blocks[0], LayerMode.dense_global(), cfg.num_heads)
        assert np.array_equal(a.data, b.data)

    def test_frame_permutation_permutes_output(self):
        cfg, model, batch = small_setup(mode="pi3", N=4)
        perm = np.array([2, 0, 3, 1])
        out = frame_attention_block(batch, model.blocks[0], cfg.num_heads)
        out_p = frame_attention_block(
            batch.replace_data(batch.data[:, perm]), model.blocks[0], cfg.num_heads
        )
        assert rel_err(out_p.data[:, 0], out.data[:, perm[0]]) < 1e-6


class TestGlobalBlock:
    def test_sigma_one_matches_dense(self):
        cfg, model, batch = small_setup(N=2)
        dense = global_attention_block(
            batch, model.blocks[1], LayerMode.dense_global(), cfg.num_heads
        )
        for overrides in ({}, {"diagonal": False, "mean_fill": False}):
            spec = SubsampleSpec.from_sigma(1, **overrides)
            sub = global_attention_block(
                batch, model.blocks[1], LayerMode.subsampled(spec), cfg.num_heads
            )
            assert rel_err(sub.data, dense.data) < 1e-5

    def test_mean_kv_runs_and_mixes_frames(self):
        cfg, model, batch = small_setup(N=3)
        out = global_attention_block(batch, model.blocks[1], LayerMode.mean_kv(), cfg.num_heads)
        bumped = batch.data.copy()
        bumped[0, 2] += 0.25
        out2 = global_attention_block(
            batch.replace_data(bumped), model.blocks[1], LayerMode.mean_kv(), cfg.num_heads
        )
        # pooled K/V carry frame 2's perturbation into every frame
        assert not np.array_equal(out.data[0, 0], out2.data[0, 0])

    def test_subsampled_mixes_frames(self):
        cfg, model, batch = small_setup(N=3, n_h=4, n_w=4)
        spec = SubsampleSpec.from_sigma(4)
        out = global_attention_block(
            batch, model.blocks[1], LayerMode.subsampled(spec), cfg.num_heads
        )
        bumped = batch.data.copy()
        bumped[0, 2] += 0.25
        out2 = global_attention_block(
            batch.replace_data(bumped), model.blocks[1], LayerMode.subsampled(spec), cfg.num_heads
        )
        assert not np.array_equal(out.data[0, 0], out2.data[0, 0])

    def test_wrong_plan_count_rejected(self):
        cfg, model, batch = small_setup(N=2)
        spec = SubsampleSpec.from_sigma(4, keep_first_frame_full=False)
        with pytest.raises(ValueError, match="plans"):
            global_attention_block(
                batch, model.blocks[1], LayerMode.subsampled(spec), cfg.num_heads, plans=[]
            )


class TestForward:
    def test_schedule_length_mismatch(self):
        cfg, model, batch = small_setup(num_blocks=6)
        with pytest.raises(ValueError, match="global layers"):
            forward(model, batch, dense_schedule(2))

    def test_no_schedule_is_dense(self):
        cfg, model, batch = small_setup()
        a = forward(model, batch)
        b = forward(model, batch, dense_schedule(cfg.num_global))
        assert np.array_equal(a.data, b.data)

    def test_sigma_one_chain_matches_dense(self):
        cfg, model, batch = small_setup(num_blocks=6, N=3)
        sched = build_schedule(cfg.num_global, 0, cfg.num_global - 1, 1)
        dense = forward(model, batch)
        sub = forward(model, batch, sched)
        assert rel_err(sub.data, dense.data) < 1e-5

    def test_forward_deterministic(self):
        cfg, model, batch = small_setup(num_blocks=6, N=3, n_h=4, n_w=4)
        sched = build_schedule(
            cfg.num_global, 1, 2, 4, spec_overrides={"strategy": "random", "seed": 5}
        )
        assert np.array_equal(forward(model, batch, sched).data, forward(model, batch, sched).data)

    def test_frame_converted_never_mixes_frames(self):
        cfg, model, batch = small_setup(num_blocks=6, N=3)
        # all-FrameConverted schedule, built by hand
        modes = tuple(LayerMode.frame_converted() for _ in range(cfg.num_global))
        sched = LayerSchedule(modes=modes, t_early=0, t_end=cfg.num_global - 1, sigma=1)
        out = forward(model, batch, sched)
        bumped = batch.data.copy()
        bumped[0, 1] += 0.5
        out2 = forward(model, batch.replace_data(bumped), sched)
        assert np.array_equal(out.data[0, 0], out2.data[0, 0])
        assert np.array_equal(out.data[0, 2], out2.data[0, 2])

    def test_pi3_permutation_equivariance(self):
        cfg, model, batch = small_setup(mode="pi3", num_blocks=4, N=4, n_h=4, n_w=4)
        sched = build_schedule(
            cfg.num_global, 1, cfg.num_global - 1, 4,
            spec_overrides={"keep_first_frame_full": False},
        )
        rng = np.random.default_rng(0)
        out = forward(model, batch, sched)
        for _ in range(5):
            perm = rng.permutation(4)
            out_p = forward(model, batch.replace_data(batch.data[:, perm]), sched)
            assert rel_err(out_p.data, out.data[:, perm]) < 1e-5

    def test_vggt_first_frame_asymmetry(self):
        cfg, model, batch = small_setup(mode="vggt", num_blocks=4, N=3, n_h=4, n_w=4)
        sched = build_schedule(
            cfg.num_global, 1, cfg.num_global - 1, 4,
            spec_overrides={"keep_first_frame_full": True},
        )
        swap = np.array([1, 0, 2])
        out = forward(model, batch, sched)
        out_s = forward(model, batch.replace_data(batch.data[:, swap]), sched)
        assert rel_err(out_s.data, out.data[:, swap]) > 1e-4

    def test_norm_selection_tracks_features_unless_frozen(self):
        cfg, model, batch = small_setup(num_blocks=6, N=2, n_h=4, n_w=4, seed=3)
        base = {"strategy": "high_norm", "keep_first_frame_full": False}
        live = build_schedule(cfg.num_global, 0, cfg.num_global - 1, 4, spec_overrides=base)
        frozen = build_schedule(
            cfg.num_global, 0, cfg.num_global - 1, 4,
            spec_overrides={**base, "freeze_selection": True},
        )
        a = forward(model, batch, live)
        b = forward(model, batch, frozen)
        assert not np.array_equal(a.data, b.data)

    def test_timer_sections_once_per_block(self):
        class Recorder:
            def __init__(self):
                self.calls = 0

            def section(self, name):
                assert name == "attention"
                self.calls += 1
                from contextlib import nullcontext

                return nullcontext()

        cfg, model, batch = small_setup(num_blocks=4)
        rec = Recorder()
        forward(model, batch, timer=rec)
        assert rec.calls == cfg.num_blocks
