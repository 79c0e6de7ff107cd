"""Layer schedules and the alternating frame/global forward pass.

A schedule assigns one mode to each global attention layer (indexed from 0
in depth order): early layers run as frame attention, a middle band runs
subsampled global attention, and an optional tail reverts to frame attention
for ablations. Frame attention blocks are never touched.
"""

from __future__ import annotations

from contextlib import nullcontext
from dataclasses import dataclass, field

import numpy as np

from .core import BlockWeights, Model, TokenBatch, dense_mha, layer_norm
from .sga import SgaPlan, build_plan, mean_kv_attention, sga_attention
from .subsample import HIGH_NORM, LOW_NORM, SubsampleSpec

FRAME_CONVERTED = "frame_converted"
DENSE_GLOBAL = "dense_global"
SUBSAMPLED = "subsampled"
MEAN_KV = "mean_kv"

MODE_KINDS = (FRAME_CONVERTED, DENSE_GLOBAL, SUBSAMPLED, MEAN_KV)

EARLY_FRAME = "frame"
EARLY_MEAN_KV = "mean_kv"


@dataclass(frozen=True)
class LayerMode:
    """Execution mode of one global attention layer."""

    kind: str
    spec: SubsampleSpec | None = None

    def __post_init__(self):
        if self.kind not in MODE_KINDS:
            raise ValueError(f"unknown layer mode {self.kind!r}")
        if (self.kind == SUBSAMPLED) != (self.spec is not None):
            raise ValueError("subsampled mode requires a SubsampleSpec; others forbid one")

    @classmethod
    def frame_converted(cls) -> "LayerMode":
        return cls(FRAME_CONVERTED)

    @classmethod
    def dense_global(cls) -> "LayerMode":
        return cls(DENSE_GLOBAL)

    @classmethod
    def subsampled(cls, spec: SubsampleSpec) -> "LayerMode":
        return cls(SUBSAMPLED, spec)

    @classmethod
    def mean_kv(cls) -> "LayerMode":
        return cls(MEAN_KV)

    def describe(self) -> str:
        if self.kind == SUBSAMPLED:
            s = self.spec
            extras = []
            if s.diagonal:
                extras.append("diag")
            if s.mean_fill:
                extras.append("mean")
            if s.keep_first_frame_full:
                extras.append("frame0-full")
            tail = f" [{', '.join(extras)}]" if extras else ""
            return f"subsampled sigma={s.sigma} ({s.s_h}x{s.s_w}) {s.strategy}{tail}"
        return self.kind


@dataclass(frozen=True)
class LayerSchedule:
    """One LayerMode per global layer, plus the parameters that built it."""

    modes: tuple[LayerMode, ...]
    t_early: int
    t_end: int
    sigma: int
    spec: SubsampleSpec = field(default_factory=lambda: SubsampleSpec.from_sigma(1))

    @property
    def num_global(self) -> int:
        return len(self.modes)

    def to_dict(self) -> dict:
        return {
            "num_global": self.num_global,
            "t_early": self.t_early,
            "t_end": self.t_end,
            "sigma": self.sigma,
            "strategy": self.spec.strategy,
            "diagonal": self.spec.diagonal,
            "mean_fill": self.spec.mean_fill,
            "keep_first_frame_full": self.spec.keep_first_frame_full,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSchedule":
        overrides = {
            k: d[k]
            for k in ("strategy", "diagonal", "mean_fill", "keep_first_frame_full")
            if k in d
        }
        return build_schedule(
            d["num_global"], d["t_early"], d["t_end"], d["sigma"], spec_overrides=overrides
        )


def build_schedule(
    num_global: int,
    t_early: int,
    t_end: int,
    sigma: int,
    spec_overrides: dict | None = None,
    *,
    early_mode: str = EARLY_FRAME,
) -> LayerSchedule:
    """Assemble the per-layer mode list.

    Layers with index < t_early are converted (frame attention by default,
    mean-K/V with early_mode="mean_kv"); layers in [t_early, t_end] run
    subsampled global attention; layers past t_end, if any, are converted to
    frame attention.
    """
    if num_global < 1:
        raise ValueError("num_global must be positive")
    if not 0 <= t_early <= num_global:
        raise ValueError(f"t_early={t_early} outside [0, {num_global}]")
    if t_early > t_end:
        raise ValueError(f"t_early={t_early} exceeds t_end={t_end}")
    if t_end >= num_global:
        raise ValueError(f"t_end={t_end} outside [t_early, {num_global - 1}]")
    if early_mode not in (EARLY_FRAME, EARLY_MEAN_KV):
        raise ValueError(f"unknown early_mode {early_mode!r}")

    spec = SubsampleSpec.from_sigma(sigma, **(spec_overrides or {}))
    early = LayerMode.frame_converted() if early_mode == EARLY_FRAME else LayerMode.mean_kv()
    modes = []
    for i in range(num_global):
        if i < t_early:
            modes.append(early)
        elif i <= t_end:
            modes.append(LayerMode.subsampled(spec))
        else:
            modes.append(LayerMode.frame_converted())
    return LayerSchedule(modes=tuple(modes), t_early=t_early, t_end=t_end, sigma=sigma, spec=spec)


def dense_schedule(num_global: int) -> LayerSchedule:
    """Baseline: every global layer stays dense."""
    if num_global < 1:
        raise ValueError("num_global must be positive")
    modes = tuple(LayerMode.dense_global() for _ in range(num_global))
    return LayerSchedule(modes=modes, t_early=0, t_end=num_global - 1, sigma=1)


def describe_schedule(schedule: LayerSchedule) -> list[str]:
    """Per-layer rows for the schedule table."""
    return [f"{i:3d}  {mode.describe()}" for i, mode in enumerate(schedule.modes)]


def _block_attention(x: np.ndarray, w: BlockWeights, num_heads: int, attend, timer) -> np.ndarray:
    """Pre-norm attention sublayer over stacked sequences x (G, M, C).

    attend(qh, kh, vh, g) returns the per-head context for sequence g; only
    this call is charged to the timer's "attention" phase.
    """
    G, M, C = x.shape
    flat = x.reshape(-1, C)
    h = layer_norm(flat, w.attn_norm_scale, w.attn_norm_bias)
    q = (h @ w.wq).reshape(G, M, C)
    k = (h @ w.wk).reshape(G, M, C)
    v = (h @ w.wv).reshape(G, M, C)
    dh = C // num_heads
    ctx = np.empty((G, M, C), dtype=x.dtype)
    section = timer.section("attention") if timer is not None else nullcontext()
    with section:
        for g in range(G):
            for head in range(num_heads):
                sl = slice(head * dh, (head + 1) * dh)
                ctx[g, :, sl] = attend(q[g, :, sl], k[g, :, sl], v[g, :, sl], g)
    return flat + ctx.reshape(-1, C) @ w.wo


def _mlp(x: np.ndarray, w: BlockWeights) -> np.ndarray:
    h = layer_norm(x, w.mlp_norm_scale, w.mlp_norm_bias)
    return x + (np.tanh(h @ w.mlp_w1 + w.mlp_b1) @ w.mlp_w2 + w.mlp_b2)


def frame_attention_block(
    batch: TokenBatch, weights: BlockWeights, num_heads: int, *, timer=None
) -> TokenBatch:
    """Attention within each frame's L tokens, then residual MLP."""
    B, N, L, C = batch.data.shape
    x = batch.data.reshape(B * N, L, C)

    def attend(qh, kh, vh, g):
        return dense_mha(qh, kh, vh)

    out = _block_attention(x, weights, num_heads, attend, timer)
    out = _mlp(out, weights)
    return batch.replace_data(out.reshape(B, N, L, C))


def global_attention_block(
    batch: TokenBatch,
    weights: BlockWeights,
    mode: LayerMode,
    num_heads: int,
    *,
    score_maps: np.ndarray | None = None,
    plans: list[SgaPlan] | None = None,
    timer=None,
) -> TokenBatch:
    """One global layer under the given mode.

    FrameConverted runs the frame-scoped computation with this block's own
    weights. Subsampled derives one plan per batch element from the block
    input unless precomputed plans are supplied.
    """
    if mode.kind == FRAME_CONVERTED:
        return frame_attention_block(batch, weights, num_heads, timer=timer)

    B, N, L, C = batch.data.shape
    x = batch.data.reshape(B, N * L, C)

    if mode.kind == DENSE_GLOBAL:

        def attend(qh, kh, vh, g):
            return dense_mha(qh, kh, vh)

    elif mode.kind == MEAN_KV:

        def attend(qh, kh, vh, g):
            return mean_kv_attention(qh, kh, vh)

    else:
        if plans is None:
            plans = plans_for(batch, mode.spec, score_maps=score_maps)
        elif len(plans) != B:
            raise ValueError(f"got {len(plans)} plans for batch of {B}")

        def attend(qh, kh, vh, g):
            return sga_attention(qh, kh, vh, plans[g])

    out = _block_attention(x, weights, num_heads, attend, timer)
    out = _mlp(out, weights)
    return batch.replace_data(out.reshape(B, N, L, C))


def plans_for(
    batch: TokenBatch, spec: SubsampleSpec, *, score_maps: np.ndarray | None = None
) -> list[SgaPlan]:
    """One kernel plan per batch element."""
    return [build_plan(batch, spec, score_maps=score_maps, batch_index=b) for b in range(batch.B)]


def _selection_reusable(spec: SubsampleSpec) -> bool:
    # Norm-driven strategies track the evolving features layer by layer
    # unless frozen; everything else picks the same rows at every depth.
    if spec.strategy in (HIGH_NORM, LOW_NORM):
        return spec.freeze_selection
    return True


def forward(
    model: Model,
    batch: TokenBatch,
    schedule: LayerSchedule | None = None,
    *,
    score_maps: np.ndarray | None = None,
    timer=None,
) -> TokenBatch:
    """Run all blocks in depth order; global layer g follows schedule.modes[g].

    Returns the final token batch with special tokens still in place. With no
    schedule every global layer runs dense.
    """
    cfg = model.config
    if schedule is not None and schedule.num_global != cfg.num_global:
        raise ValueError(
            f"schedule covers {schedule.num_global} global layers, model has {cfg.num_global}"
        )

    x = batch
    g = 0
    plan_cache: dict[SubsampleSpec, list[SgaPlan]] = {}
    for i in range(cfg.num_blocks):
        w = model.blocks[i]
        if not cfg.is_global_block(i):
            x = frame_attention_block(x, w, cfg.num_heads, timer=timer)
            continue
        mode = schedule.modes[g] if schedule is not None else LayerMode.dense_global()
        plans = None
        if mode.kind == SUBSAMPLED:
            plans = plan_cache.get(mode.spec)
            if plans is None:
                plans = plans_for(x, mode.spec, score_maps=score_maps)
                if _selection_reusable(mode.spec):
                    plan_cache[mode.spec] = plans
        x = global_attention_block(
            x, w, mode, cfg.num_heads, score_maps=score_maps, plans=plans, timer=timer
        )
        g += 1
    return x
