"""Subsampled global attention toolkit for alternating frame/global aggregators.

The pieces compose bottom-up: `core` builds the synthetic model and token
batches, `subsample` picks which key/value columns a global layer keeps,
`sga` runs the shared-softmax kernel (with its oracle and verification
harness), `aggregator` schedules whole stacks, `analysis` probes attention
structure, and `bench` counts and times it all. The `sgattn` console script
exposes the same flow as `schedule`, `verify`, `bench`, and `analyze`
subcommands.
"""

from sgattn.aggregator import (
    DENSE_GLOBAL,
    FRAME_CONVERTED,
    MEAN_KV,
    MODE_KINDS,
    SUBSAMPLED,
    LayerMode,
    LayerSchedule,
    build_schedule,
    dense_schedule,
    describe_schedule,
    forward,
    frame_attention_block,
    global_attention_block,
    plans_for,
)
from sgattn.analysis import (
    ROTATE_RE_ENCODE,
    ROTATE_RELABEL,
    AttentionEntry,
    LayerAttentionStats,
    RotationReport,
    head_avg_patch_attention,
    layer_stats,
    probe_attention_matrices,
    rotate_batch,
    rotation_consistency,
    topk_entries,
)
from sgattn.bench import (
    DEFAULT_MEMORY_BUDGET,
    FLOP_NOTE,
    BenchConfig,
    BenchmarkRecord,
    CostReport,
    LayerCost,
    PhaseTimer,
    dense_attention_scaling,
    flop_model,
    load_sweep,
    run_benchmark,
    scaling_exponent,
    sweep,
    worker_count,
)
from sgattn.core import (
    DEFAULT_NUM_BLOCKS,
    PI3_STYLE,
    VGGT_STYLE,
    Model,
    ModelConfig,
    TokenBatch,
    dense_mha,
    init_tokens,
    make_model,
)
from sgattn.sga import (
    SgaPlan,
    VerificationReport,
    build_plan,
    mean_kv_attention,
    run_verification,
    sga_attention,
    sga_oracle,
)
from sgattn.subsample import (
    STRATEGIES,
    KVSelection,
    SubsampleSpec,
    factorize_sigma,
    grid_indices,
    grid_kept_count,
    select_kv,
)

__all__ = [
    "DENSE_GLOBAL",
    "FRAME_CONVERTED",
    "MEAN_KV",
    "MODE_KINDS",
    "SUBSAMPLED",
    "LayerMode",
    "LayerSchedule",
    "build_schedule",
    "dense_schedule",
    "describe_schedule",
    "forward",
    "frame_attention_block",
    "global_attention_block",
    "plans_for",
    "ROTATE_RE_ENCODE",
    "ROTATE_RELABEL",
    "AttentionEntry",
    "LayerAttentionStats",
    "RotationReport",
    "head_avg_patch_attention",
    "layer_stats",
    "probe_attention_matrices",
    "rotate_batch",
    "rotation_consistency",
    "topk_entries",
    "DEFAULT_MEMORY_BUDGET",
    "FLOP_NOTE",
    "BenchConfig",
    "BenchmarkRecord",
    "CostReport",
    "LayerCost",
    "PhaseTimer",
    "dense_attention_scaling",
    "flop_model",
    "load_sweep",
    "run_benchmark",
    "scaling_exponent",
    "sweep",
    "worker_count",
    "DEFAULT_NUM_BLOCKS",
    "PI3_STYLE",
    "VGGT_STYLE",
    "Model",
    "ModelConfig",
    "TokenBatch",
    "dense_mha",
    "init_tokens",
    "make_model",
    "SgaPlan",
    "VerificationReport",
    "build_plan",
    "mean_kv_attention",
    "run_verification",
    "sga_attention",
    "sga_oracle",
    "STRATEGIES",
    "KVSelection",
    "SubsampleSpec",
    "factorize_sigma",
    "grid_indices",
    "grid_kept_count",
    "select_kv",
]

__version__ = "0.1.0"
