"""Analytic FLOP cost model and wall-clock benchmark harness.

The cost model counts multiply-adds and softmax elements per block from the
schedule alone, so predicted speedups can be audited without running
anything. The harness times full forwards on synthetic tokens against a
dense twin built from the same seed and reports median-of-R per phase.
Counting conventions: one fused multiply-add = 2 FLOPs, softmax = 5 FLOPs
per element, layer norms and activations excluded. Stated in every report.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import itertools
import json
import os
import statistics
import time
from contextlib import contextmanager
from csv import DictWriter
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import tomli
from threadpoolctl import threadpool_limits

from ._io import atomic_write_text
from .aggregator import (
    DENSE_GLOBAL,
    FRAME_CONVERTED,
    MEAN_KV,
    SUBSAMPLED,
    LayerSchedule,
    build_schedule,
    dense_schedule,
    forward,
)
from .core import PI3_STYLE, ModelConfig, init_tokens, make_model
from .subsample import (
    MEAN_SCOPE_GLOBAL,
    SCORE,
    SubsampleSpec,
    default_keep_first_frame_full,
    grid_kept_count,
)

FLOP_NOTE = (
    "multiply-add = 2 FLOPs; softmax = 5 FLOPs/element; "
    "layer norms and activations excluded"
)

# Conservative working-set ceiling for a single benchmark forward.
DEFAULT_MEMORY_BUDGET = 3 << 30

CSV_COLUMNS = (
    "config_id", "N", "n_h", "n_w", "C", "H", "sigma", "t_early", "t_end",
    "strategy", "diag", "mean_fill", "phase", "median_s", "min_s", "max_s",
    "speedup",
)

FRAME_BLOCK = "frame"


def worker_count() -> int:
    """Thread cap for timed runs: SGA_WORKERS if set, else machine count."""
    env = os.environ.get("SGA_WORKERS")
    if env is not None:
        n = int(env)
        if n < 1:
            raise ValueError(f"SGA_WORKERS must be >= 1, got {env}")
        return n
    return os.cpu_count() or 1


class PhaseTimer:
    """Accumulates wall seconds per named phase via context-manager sections."""

    def __init__(self):
        self.seconds: dict[str, float] = {}
        self.calls: dict[str, int] = {}

    @contextmanager
    def section(self, name: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            elapsed = time.perf_counter() - start
            self.seconds[name] = self.seconds.get(name, 0.0) + elapsed
            self.calls[name] = self.calls.get(name, 0) + 1


# ---------------------------------------------------------------------------
# FLOP model


@dataclass(frozen=True)
class LayerCost:
    """Operation counts for one block of the alternating stack."""

    block: int
    kind: str
    attn_macs: int
    softmax_elements: int
    proj_macs: int
    mlp_macs: int

    @property
    def attn_flops(self) -> int:
        return 2 * self.attn_macs + 5 * self.softmax_elements

    @property
    def total_flops(self) -> int:
        return self.attn_flops + 2 * (self.proj_macs + self.mlp_macs)


@dataclass(frozen=True)
class CostReport:
    """Predicted cost of a schedule next to its dense twin."""

    note: str
    layers: tuple[LayerCost, ...]
    attention_flops: int
    total_flops: int
    dense_attention_flops: int
    dense_total_flops: int

    @property
    def predicted_speedup(self) -> float:
        """Attention-phase ratio; the quantity the harness measures."""
        return self.dense_attention_flops / self.attention_flops

    @property
    def predicted_total_speedup(self) -> float:
        return self.dense_total_flops / self.total_flops

    def to_dict(self) -> dict:
        return {
            "note": self.note,
            "layers": [dataclasses.asdict(l) for l in self.layers],
            "attention_flops": self.attention_flops,
            "total_flops": self.total_flops,
            "dense_attention_flops": self.dense_attention_flops,
            "dense_total_flops": self.dense_total_flops,
            "predicted_speedup": self.predicted_speedup,
            "predicted_total_speedup": self.predicted_total_speedup,
        }


def _kv_columns(spec: SubsampleSpec, N: int, T: int, num_special: int,
                n_h: int, n_w: int) -> int:
    """Key/value columns one query sees under a subsampled layer."""
    if spec.sigma == 1:
        kept_frame = T
    else:
        kept_frame = grid_kept_count(n_h, n_w, spec.s_h, spec.s_w)
    if spec.keep_first_frame_full:
        kept_total = T + (N - 1) * kept_frame
        frames_with_drops = (N - 1) if kept_frame < T else 0
    else:
        kept_total = N * kept_frame
        frames_with_drops = N if kept_frame < T else 0
    cols = N * num_special + kept_total
    if frames_with_drops:
        if spec.diagonal:
            cols += 1
        if spec.mean_fill:
            cols += 1 if spec.mean_scope == MEAN_SCOPE_GLOBAL else frames_with_drops
    return cols


def _block_cost(block: int, kind: str, cols: int, N: int, L: int, C: int,
                H: int, hidden: int) -> LayerCost:
    M = N * L
    if kind in (FRAME_BLOCK, FRAME_CONVERTED):
        attn = 2 * N * L * L * C
        soft = H * N * L * L
    else:
        attn = 2 * M * cols * C
        soft = H * M * cols
    return LayerCost(
        block=block,
        kind=kind,
        attn_macs=attn,
        softmax_elements=soft,
        proj_macs=4 * M * C * C,
        mlp_macs=2 * M * C * hidden,
    )


def flop_model(schedule: LayerSchedule, N: int, L: int, T: int, C: int, H: int,
               *, n_h: int, n_w: int, mlp_ratio: float = 4.0) -> CostReport:
    """Count operations for the full alternating stack under a schedule.

    The stack holds one frame block before each scheduled global layer, the
    way the model runs it. n_h and n_w fix the patch grid so kept-token
    counts are exact rather than inferred from T.
    """
    if n_h < 1 or n_w < 1 or n_h * n_w != T:
        raise ValueError(f"inconsistent T: n_h*n_w = {n_h}*{n_w} != {T}")
    if L <= T:
        raise ValueError(f"inconsistent L: {L} must exceed patch count {T}")
    if N < 1 or C < 1 or H < 1:
        raise ValueError("N, C, H must be positive")
    num_special = L - T
    hidden = int(round(mlp_ratio * C))

    def stack(modes) -> list[LayerCost]:
        rows = []
        for i, mode in enumerate(modes):
            rows.append(_block_cost(2 * i, FRAME_BLOCK, 0, N, L, C, H, hidden))
            if mode.kind == SUBSAMPLED:
                cols = _kv_columns(mode.spec, N, T, num_special, n_h, n_w)
            elif mode.kind == DENSE_GLOBAL:
                cols = N * L
            elif mode.kind == MEAN_KV:
                cols = 1
            else:
                cols = 0
            rows.append(_block_cost(2 * i + 1, mode.kind, cols, N, L, C, H, hidden))
        return rows

    layers = stack(schedule.modes)
    baseline = stack(dense_schedule(len(schedule.modes)).modes)
    return CostReport(
        note=FLOP_NOTE,
        layers=tuple(layers),
        attention_flops=sum(l.attn_flops for l in layers),
        total_flops=sum(l.total_flops for l in layers),
        dense_attention_flops=sum(l.attn_flops for l in baseline),
        dense_total_flops=sum(l.total_flops for l in baseline),
    )


# ---------------------------------------------------------------------------
# Benchmark harness


@dataclass(frozen=True)
class BenchConfig:
    """One benchmark point: model size, token grid, and schedule knobs."""

    N: int = 16
    n_h: int = 14
    n_w: int = 14
    C: int = 64
    H: int = 4
    num_blocks: int = 8
    sigma: int = 4
    t_early: int = 2
    t_end: int | None = None
    strategy: str = "grid"
    diagonal: bool = True
    mean_fill: bool = True
    keep_first_frame_full: bool | None = None
    mode: str = PI3_STYLE
    num_special: int = 5
    mlp_ratio: float = 4.0
    seed: int = 0

    @property
    def num_global(self) -> int:
        return self.num_blocks // 2

    @property
    def resolved_t_end(self) -> int:
        return self.num_global - 1 if self.t_end is None else self.t_end

    @property
    def resolved_keep_first(self) -> bool:
        if self.keep_first_frame_full is None:
            return default_keep_first_frame_full(self.mode)
        return self.keep_first_frame_full

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            mode=self.mode,
            num_blocks=self.num_blocks,
            embed_dim=self.C,
            num_heads=self.H,
            mlp_ratio=self.mlp_ratio,
            seed=self.seed,
            num_special=self.num_special,
        )

    def schedule(self) -> LayerSchedule:
        return build_schedule(
            self.num_global, self.t_early, self.resolved_t_end, self.sigma,
            spec_overrides={
                "strategy": self.strategy,
                "diagonal": self.diagonal,
                "mean_fill": self.mean_fill,
                "keep_first_frame_full": self.resolved_keep_first,
            },
        )

    def cost_report(self) -> CostReport:
        T = self.n_h * self.n_w
        return flop_model(
            self.schedule(), self.N, T + self.num_special, T, self.C, self.H,
            n_h=self.n_h, n_w=self.n_w, mlp_ratio=self.mlp_ratio,
        )

    def config_id(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True,
                          separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:10]


@dataclass(frozen=True)
class PhaseStats:
    median_s: float
    min_s: float
    max_s: float


@dataclass(frozen=True)
class BenchmarkRecord:
    """Measured times for one config and its dense twin."""

    config: BenchConfig
    repeats: int
    phases: dict[str, PhaseStats]
    dense_phases: dict[str, PhaseStats]
    speedup: dict[str, float]
    timestamp: str
    environment: str

    def to_rows(self, phase_names: tuple[str, ...] = ("forward", "attention")) -> list[dict]:
        c = self.config
        rows = []
        for name in phase_names:
            st = self.phases[name]
            rows.append({
                "config_id": c.config_id(),
                "N": c.N, "n_h": c.n_h, "n_w": c.n_w, "C": c.C, "H": c.H,
                "sigma": c.sigma, "t_early": c.t_early, "t_end": c.resolved_t_end,
                "strategy": c.strategy,
                "diag": "true" if c.diagonal else "false",
                "mean_fill": "true" if c.mean_fill else "false",
                "phase": name,
                "median_s": repr(st.median_s),
                "min_s": repr(st.min_s),
                "max_s": repr(st.max_s),
                "speedup": repr(self.speedup[name]),
            })
        return rows

    def to_dict(self) -> dict:
        return {
            "config": dataclasses.asdict(self.config),
            "config_id": self.config.config_id(),
            "repeats": self.repeats,
            "phases": {k: dataclasses.asdict(v) for k, v in self.phases.items()},
            "dense_phases": {k: dataclasses.asdict(v) for k, v in self.dense_phases.items()},
            "speedup": dict(self.speedup),
            "timestamp": self.timestamp,
            "environment": self.environment,
        }


def estimate_forward_bytes(config: BenchConfig) -> int:
    """Rough peak working set of one forward, float32 throughout."""
    M = config.N * (config.n_h * config.n_w + config.num_special)
    C = config.C
    work = 8 * M * C * 4
    logits = 2 * min(4096, M) * M * 4
    weights = config.num_blocks * (4 * C * C + 2 * 4 * C * C) * 4
    return work + logits + weights


def _score_maps(config: BenchConfig) -> np.ndarray | None:
    if config.strategy != SCORE:
        return None
    rng = np.random.default_rng(config.seed)
    return rng.uniform(size=(config.N, config.n_h * config.n_w)).astype(np.float32)


def _timed_runs(model, batch, schedule, repeats, warmups, score_maps):
    for _ in range(warmups):
        forward(model, batch, schedule, score_maps=score_maps)
    samples = []
    for _ in range(repeats):
        timer = PhaseTimer()
        with timer.section("forward"):
            forward(model, batch, schedule, score_maps=score_maps, timer=timer)
        samples.append(timer.seconds)
    return {
        name: PhaseStats(
            median_s=statistics.median(s[name] for s in samples),
            min_s=min(s[name] for s in samples),
            max_s=max(s[name] for s in samples),
        )
        for name in samples[0]
    }


def run_benchmark(config: BenchConfig, repeats: int = 5, *, warmups: int = 2,
                  memory_budget: int = DEFAULT_MEMORY_BUDGET,
                  out_dir: str | Path | None = None) -> BenchmarkRecord:
    """Time the scheduled forward against a dense twin on identical inputs.

    Median of `repeats` runs after `warmups` discarded runs, monotonic clock,
    BLAS threads capped at worker_count() for the duration. Refuses configs
    whose estimated working set exceeds memory_budget.
    """
    if repeats < 3:
        raise ValueError(f"repeats must be >= 3, got {repeats}")
    if warmups < 1:
        raise ValueError(f"warmups must be >= 1, got {warmups}")
    need = estimate_forward_bytes(config)
    if need > memory_budget:
        raise ValueError(
            f"estimated working set {need} bytes exceeds the memory budget "
            f"of {memory_budget} bytes; shrink N, the grid, or C"
        )

    cfg = config.model_config()
    model = make_model(cfg)
    batch = init_tokens(cfg, 1, config.N, config.n_h, config.n_w, seed=config.seed)
    maps = _score_maps(config)
    scheduled = config.schedule()
    baseline = dense_schedule(config.num_global)

    workers = worker_count()
    with threadpool_limits(limits=workers):
        dense_stats = _timed_runs(model, batch, baseline, repeats, warmups, maps)
        sched_stats = _timed_runs(model, batch, scheduled, repeats, warmups, maps)

    record = BenchmarkRecord(
        config=config,
        repeats=repeats,
        phases=sched_stats,
        dense_phases=dense_stats,
        speedup={
            name: dense_stats[name].median_s / sched_stats[name].median_s
            for name in sched_stats
            if name in dense_stats
        },
        timestamp=datetime.now(timezone.utc).isoformat(timespec="seconds"),
        environment=(
            f"workers={workers}; dtype=float32; clock=perf_counter; "
            f"numpy={np.__version__}"
        ),
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_benchmark_csv(record.to_rows(), out / "bench.csv")
        write_benchmark_json(record.to_dict(), out / "bench.json")
    return record


# ---------------------------------------------------------------------------
# Sweeps and scaling fits


def load_sweep(path: str | Path) -> list[BenchConfig]:
    """Parse a sweep file: [base] defaults, [grid] cartesian lists, [[run]] rows."""
    data = tomli.loads(Path(path).read_text())
    known = {f.name for f in dataclasses.fields(BenchConfig)}

    def check(d: dict, where: str) -> dict:
        bad = sorted(set(d) - known)
        if bad:
            raise ValueError(f"unknown sweep key(s) {bad} in {where}")
        return d

    base = check(dict(data.get("base", {})), "[base]")
    points: list[dict] = []
    grid = check(dict(data.get("grid", {})), "[grid]")
    if grid:
        keys = sorted(grid)
        for combo in itertools.product(*(grid[k] for k in keys)):
            d = dict(base)
            d.update(zip(keys, combo))
            points.append(d)
    for i, run in enumerate(data.get("run", [])):
        d = dict(base)
        d.update(check(dict(run), f"[[run]] #{i}"))
        points.append(d)
    return [BenchConfig(**p) for p in points]


def _error_row(config: BenchConfig, exc: Exception) -> dict:
    return {
        "config_id": config.config_id(),
        "N": config.N, "n_h": config.n_h, "n_w": config.n_w,
        "C": config.C, "H": config.H, "sigma": config.sigma,
        "t_early": config.t_early, "t_end": config.resolved_t_end,
        "strategy": config.strategy,
        "diag": "true" if config.diagonal else "false",
        "mean_fill": "true" if config.mean_fill else "false",
        "phase": "error",
        "median_s": "", "min_s": "", "max_s": "", "speedup": "",
        "error": f"{type(exc).__name__}: {exc}",
    }


def sweep(configs, csv_path: str | Path | None = None, *, repeats: int = 3,
          warmups: int = 1, memory_budget: int = DEFAULT_MEMORY_BUDGET) -> list[dict]:
    """Benchmark each config in turn, one forward-phase row per config.

    A failing row is recorded with phase="error" and the sweep continues.
    """
    rows = []
    for config in configs:
        try:
            record = run_benchmark(config, repeats=repeats, warmups=warmups,
                                   memory_budget=memory_budget)
            rows.append(record.to_rows(phase_names=("forward",))[0])
        except Exception as exc:  # noqa: BLE001 - row isolation is the contract
            rows.append(_error_row(config, exc))
    if csv_path is not None:
        write_benchmark_csv(rows, csv_path)
    return rows


def scaling_exponent(sizes, times) -> float:
    """Least-squares slope of log(time) against log(size)."""
    x = np.log(np.asarray(sizes, dtype=np.float64))
    y = np.log(np.asarray(times, dtype=np.float64))
    return float(np.polyfit(x, y, 1)[0])


def dense_attention_scaling(base: BenchConfig, sizes, *, repeats: int = 3,
                            warmups: int = 1,
                            memory_budget: int = DEFAULT_MEMORY_BUDGET):
    """Measure attention-phase medians across frame counts.

    Returns (fitted exponent of the dense times, dense medians, scheduled
    medians) in the order of `sizes`.
    """
    dense_t, sched_t = [], []
    for n in sizes:
        record = run_benchmark(dataclasses.replace(base, N=int(n)),
                               repeats=repeats, warmups=warmups,
                               memory_budget=memory_budget)
        dense_t.append(record.dense_phases["attention"].median_s)
        sched_t.append(record.phases["attention"].median_s)
    return scaling_exponent(sizes, dense_t), dense_t, sched_t


# ---------------------------------------------------------------------------
# Writers


def write_benchmark_csv(rows, path: str | Path) -> None:
    buf = io.StringIO()
    writer = DictWriter(buf, fieldnames=CSV_COLUMNS, extrasaction="ignore",
                        lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    atomic_write_text(path, buf.getvalue())


def write_benchmark_json(payload: dict, path: str | Path) -> None:
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")
