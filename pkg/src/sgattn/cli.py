"""Command-line front end: schedule | verify | bench | analyze.

Configs come from a TOML file with four sections (model, data, schedule,
output); any field can be overridden on the command line as
--section.key=value, and flags beat the file, which beats built-in
defaults. Outputs land under <directory>/<config_id>/ where config_id is a
short hash of the fully resolved config, so a rerun with the same inputs
writes byte-identical artifacts. Wall-clock facts (timestamp, elapsed
times) are quarantined in run_meta.json.

Exit codes: 0 success, 1 verification failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import tomli
from threadpoolctl import threadpool_limits

from ._io import atomic_write_text
from .aggregator import (
    LayerMode,
    LayerSchedule,
    build_schedule,
    describe_schedule,
    forward,
    frame_attention_block,
    global_attention_block,
    plans_for,
)
from .analysis import (
    ROTATE_RE_ENCODE,
    ROTATE_RELABEL,
    head_avg_patch_attention,
    layer_stats,
    rotation_consistency,
    topk_entries,
    write_attention_dump,
    write_stats_csv,
    write_topk_jsonl,
)
from .bench import (
    BenchConfig,
    load_sweep,
    run_benchmark,
    sweep,
    worker_count,
    write_benchmark_csv,
    write_benchmark_json,
)
from .core import (
    DEFAULT_NUM_BLOCKS,
    PI3_STYLE,
    VGGT_STYLE,
    ModelConfig,
    init_tokens,
    make_model,
)
from .sga import mean_kv_attention, run_verification, sga_attention
from .subsample import SubsampleSpec, default_keep_first_frame_full

# Conversion depth the reference stacks tolerate before quality drops.
DEFAULT_T_EARLY = {VGGT_STYLE: 9, PI3_STYLE: 10}

FORMATS = ("json", "csv", "jsonl", "f32")

SECTIONS = ("model", "data", "schedule", "output")


class ConfigError(ValueError):
    """Invalid or unknown configuration; message carries the field path."""


@dataclass(frozen=True)
class ModelSection:
    mode: str = VGGT_STYLE
    num_blocks: int | None = None
    C: int = 64
    H: int = 4
    mlp_ratio: float = 4.0
    seed: int = 0


@dataclass(frozen=True)
class DataSection:
    B: int = 1
    N: int = 4
    n_h: int = 14
    n_w: int = 14
    seed: int = 0


@dataclass(frozen=True)
class ScheduleSection:
    t_early: int | None = None
    t_end: int | None = None
    sigma: int = 4
    strategy: str = "grid"
    diagonal: bool = True
    mean_fill: bool = True
    keep_first_frame_full: bool | None = None


@dataclass(frozen=True)
class OutputSection:
    directory: str = "runs"
    formats: tuple[str, ...] = FORMATS


_SECTION_TYPES = {
    "model": ModelSection,
    "data": DataSection,
    "schedule": ScheduleSection,
    "output": OutputSection,
}

# Concrete type of every field, for override parsing and TOML validation.
_FIELD_TYPES = {
    ("model", "mode"): str,
    ("model", "num_blocks"): int,
    ("model", "C"): int,
    ("model", "H"): int,
    ("model", "mlp_ratio"): float,
    ("model", "seed"): int,
    ("data", "B"): int,
    ("data", "N"): int,
    ("data", "n_h"): int,
    ("data", "n_w"): int,
    ("data", "seed"): int,
    ("schedule", "t_early"): int,
    ("schedule", "t_end"): int,
    ("schedule", "sigma"): int,
    ("schedule", "strategy"): str,
    ("schedule", "diagonal"): bool,
    ("schedule", "mean_fill"): bool,
    ("schedule", "keep_first_frame_full"): bool,
    ("output", "directory"): str,
    ("output", "formats"): list,
}


@dataclass(frozen=True)
class RunConfig:
    model: ModelSection = ModelSection()
    data: DataSection = DataSection()
    schedule: ScheduleSection = ScheduleSection()
    output: OutputSection = OutputSection()

    # resolved values -----------------------------------------------------

    @property
    def num_blocks(self) -> int:
        if self.model.num_blocks is not None:
            return self.model.num_blocks
        return DEFAULT_NUM_BLOCKS[self.model.mode]

    @property
    def num_global(self) -> int:
        return self.num_blocks // 2

    @property
    def t_early(self) -> int:
        if self.schedule.t_early is not None:
            return self.schedule.t_early
        return DEFAULT_T_EARLY[self.model.mode]

    @property
    def t_end(self) -> int:
        if self.schedule.t_end is not None:
            return self.schedule.t_end
        return self.num_global - 1

    @property
    def keep_first_frame_full(self) -> bool:
        if self.schedule.keep_first_frame_full is not None:
            return self.schedule.keep_first_frame_full
        return default_keep_first_frame_full(self.model.mode)

    def model_config(self) -> ModelConfig:
        try:
            return ModelConfig(
                mode=self.model.mode,
                num_blocks=self.num_blocks,
                embed_dim=self.model.C,
                num_heads=self.model.H,
                mlp_ratio=self.model.mlp_ratio,
                seed=self.model.seed,
            )
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"model: {exc}") from exc

    def layer_schedule(self) -> LayerSchedule:
        try:
            return build_schedule(
                self.num_global, self.t_early, self.t_end, self.schedule.sigma,
                spec_overrides={
                    "strategy": self.schedule.strategy,
                    "diagonal": self.schedule.diagonal,
                    "mean_fill": self.schedule.mean_fill,
                    "keep_first_frame_full": self.keep_first_frame_full,
                },
            )
        except ValueError as exc:
            raise ConfigError(f"schedule: {exc}") from exc

    def bench_config(self) -> BenchConfig:
        return BenchConfig(
            N=self.data.N, n_h=self.data.n_h, n_w=self.data.n_w,
            C=self.model.C, H=self.model.H, num_blocks=self.num_blocks,
            sigma=self.schedule.sigma, t_early=self.t_early, t_end=self.t_end,
            strategy=self.schedule.strategy, diagonal=self.schedule.diagonal,
            mean_fill=self.schedule.mean_fill,
            keep_first_frame_full=self.keep_first_frame_full,
            mode=self.model.mode, mlp_ratio=self.model.mlp_ratio,
            seed=self.data.seed,
        )

    def validate(self) -> None:
        if self.model.mode not in DEFAULT_NUM_BLOCKS:
            raise ConfigError(
                f"model.mode: unknown mode {self.model.mode!r}, "
                f"expected one of {sorted(DEFAULT_NUM_BLOCKS)}"
            )
        for key in ("B", "N", "n_h", "n_w"):
            if getattr(self.data, key) < 1:
                raise ConfigError(f"data.{key} must be >= 1")
        for fmt in self.output.formats:
            if fmt not in FORMATS:
                raise ConfigError(
                    f"output.formats: unknown format {fmt!r}, expected {FORMATS}"
                )
        self.model_config()
        self.layer_schedule()

    def resolved_dict(self) -> dict:
        d = {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}
        d["model"]["num_blocks"] = self.num_blocks
        d["schedule"]["t_early"] = self.t_early
        d["schedule"]["t_end"] = self.t_end
        d["schedule"]["keep_first_frame_full"] = self.keep_first_frame_full
        d["output"]["formats"] = list(self.output.formats)
        return d

    def config_id(self) -> str:
        blob = json.dumps(self.resolved_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:10]

    def out_dir(self) -> Path:
        return Path(self.output.directory) / self.config_id()


# ---------------------------------------------------------------------------
# Config loading


def _coerce_flag(section: str, key: str, raw: str):
    kind = _FIELD_TYPES[(section, key)]
    if kind is bool:
        low = raw.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ConfigError(f"{section}.{key}: expected a boolean, got {raw!r}")
    if kind is list:
        return [part for part in raw.split(",") if part]
    try:
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"{section}.{key}: {exc}") from exc


def parse_overrides(extras: list[str]) -> dict[tuple[str, str], object]:
    """Turn --section.key=value arguments into typed assignments."""
    out: dict[tuple[str, str], object] = {}
    for item in extras:
        if not item.startswith("--") or "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(
                f"unrecognized argument {item!r}; overrides look like --model.seed=3"
            )
        path, raw = item[2:].split("=", 1)
        section, _, key = path.partition(".")
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section: {section}")
        if (section, key) not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key: {section}.{key}")
        out[(section, key)] = _coerce_flag(section, key, raw)
    return out


def _check_toml_value(section: str, key: str, value):
    kind = _FIELD_TYPES[(section, key)]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if kind is list:
        if not isinstance(value, list) or not all(isinstance(x, str) for x in value):
            raise ConfigError(f"{section}.{key}: expected a list of strings")
        return value
    if kind is bool and not isinstance(value, bool):
        raise ConfigError(f"{section}.{key}: expected a boolean")
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise ConfigError(f"{section}.{key}: expected an integer")
    if kind is str and not isinstance(value, str):
        raise ConfigError(f"{section}.{key}: expected a string")
    return value


def load_config(path: str | None, overrides: dict[tuple[str, str], object]) -> RunConfig:
    """Defaults, then the TOML file, then command-line overrides."""
    values: dict[str, dict] = {name: {} for name in SECTIONS}
    if path is not None:
        try:
            raw = tomli.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"config file {path}: {exc}") from exc
        for section, body in raw.items():
            if section not in SECTIONS:
                raise ConfigError(f"unknown config section: {section}")
            if not isinstance(body, dict):
                raise ConfigError(f"{section}: expected a table")
            for key, value in body.items():
                if (section, key) not in _FIELD_TYPES:
                    raise ConfigError(f"unknown config key: {section}.{key}")
                values[section][key] = _check_toml_value(section, key, value)
    for (section, key), value in overrides.items():
        values[section][key] = value
    if "formats" in values["output"]:
        values["output"]["formats"] = tuple(values["output"]["formats"])
    config = RunConfig(**{
        name: _SECTION_TYPES[name](**values[name]) for name in SECTIONS
    })
    config.validate()
    return config


# ---------------------------------------------------------------------------
# Shared output plumbing


def _write_json(payload, path: Path) -> None:
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _prepare_outdir(config: RunConfig) -> Path:
    out = config.out_dir()
    out.mkdir(parents=True, exist_ok=True)
    resolved = config.resolved_dict()
    resolved["config_id"] = config.config_id()
    _write_json(resolved, out / "config.json")
    return out


def _write_meta(out: Path, command: str, started: float, extra: dict | None = None) -> None:
    meta = {
        "command": command,
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "elapsed_s": time.perf_counter() - started,
        "workers": worker_count(),
        "numpy": np.__version__,
        "python": sys.version.split()[0],
    }
    if extra:
        meta.update(extra)
    _write_json(meta, out / "run_meta.json")


def _build_model_and_batch(config: RunConfig):
    cfg = config.model_config()
    model = make_model(cfg)
    batch = init_tokens(cfg, config.data.B, config.data.N, config.data.n_h,
                        config.data.n_w, seed=config.data.seed)
    return model, batch


# ---------------------------------------------------------------------------
# Subcommands


def cmd_schedule(config: RunConfig, args) -> int:
    started = time.perf_counter()
    sched = config.layer_schedule()
    print(f"config {config.config_id()}: {config.num_global} global layers")
    for line in describe_schedule(sched):
        print(line)
    out = _prepare_outdir(config)
    _write_json(sched.to_dict(), out / "schedule.json")
    _write_meta(out, "schedule", started)
    print(f"wrote {out / 'schedule.json'}")
    return 0


def _degeneracy_checks(seed: int) -> list[dict]:
    """Identity checks the kernel must satisfy at degenerate settings."""
    results = []

    def record(name: str, ok: bool, detail: str):
        results.append({"name": name, "ok": bool(ok), "detail": detail})

    cfg = ModelConfig(mode=PI3_STYLE, num_blocks=4, embed_dim=16, num_heads=2,
                      seed=seed, num_special=2)
    model = make_model(cfg)
    batch = init_tokens(cfg, 1, 3, 4, 4, seed=seed)

    dense = forward(model, batch)
    thin = forward(model, batch, build_schedule(cfg.num_global, 0,
                                                cfg.num_global - 1, 1))
    scale = float(np.abs(dense.data).max())
    rel = float(np.abs(thin.data - dense.data).max()) / scale
    record("sigma1_matches_dense", rel <= 1e-5, f"max relative error {rel:.3e}")

    single = init_tokens(cfg, 1, 1, 4, 4, seed=seed)
    w = model.blocks[1]
    a = frame_attention_block(single, w, cfg.num_heads)
    b = global_attention_block(single, w, LayerMode.dense_global(), cfg.num_heads)
    record("single_frame_global_is_frame", np.array_equal(a.data, b.data),
           "bitwise" if np.array_equal(a.data, b.data) else "outputs differ")

    rng = np.random.default_rng(seed)
    q = rng.normal(size=(7, 8)).astype(np.float32)
    k = rng.normal(size=(9, 8)).astype(np.float32)
    v = rng.normal(size=(9, 8)).astype(np.float32)
    out = mean_kv_attention(q, k, v)
    err = float(np.abs(out - v.mean(axis=0)).max())
    record("mean_kv_rows_equal_mean", err <= 1e-6, f"max abs error {err:.3e}")

    spec_on = SubsampleSpec.from_sigma(4, keep_first_frame_full=False)
    plan_on = plans_for(batch, spec_on)[0]
    plan_off = plans_for(batch, spec_on.with_overrides(diagonal=False))[0]
    m = plan_on.num_rows
    qkv = [rng.normal(size=(m, 8)).astype(np.float32) for _ in range(3)]
    out_on = sga_attention(*qkv, plan_on)
    out_off = sga_attention(*qkv, plan_off)
    kept = ~plan_on.dropped_mask
    same = np.array_equal(out_on[kept], out_off[kept])
    record("diagonal_noop_for_kept_queries", same,
           "bitwise" if same else "kept-query rows differ")

    return results


def cmd_verify(config: RunConfig, args) -> int:
    started = time.perf_counter()
    if args.cases < 1:
        raise ConfigError("--cases must be >= 1")
    report = run_verification(
        cases=args.cases,
        seed=config.model.seed,
        tolerance=args.tolerance,
        inject_fault=args.inject_fault,
    )
    degeneracies = _degeneracy_checks(config.model.seed)
    deg_ok = all(r["ok"] for r in degeneracies)

    payload = report.to_dict()
    payload["degeneracies"] = degeneracies
    payload["ok"] = bool(report.ok and deg_ok)

    out = _prepare_outdir(config)
    _write_json(payload, out / "verify.json")
    _write_meta(out, "verify", started, extra={"verify_elapsed_s": report.elapsed_s})

    print(f"{report.passed}/{report.cases} passed "
          f"(max rel err {report.max_rel_err:.3e}, "
          f"max mass err {report.max_mass_err:.3e})")
    for r in degeneracies:
        print(f"degeneracy {r['name']}: {'ok' if r['ok'] else 'FAIL'} ({r['detail']})")
    print(f"wrote {out / 'verify.json'}")
    return 0 if payload["ok"] else 1


def cmd_bench(config: RunConfig, args) -> int:
    started = time.perf_counter()
    out = _prepare_outdir(config)
    if args.sweep is not None:
        configs = load_sweep(args.sweep)
        rows = sweep(configs, out / "sweep.csv", repeats=args.repeats,
                     warmups=args.warmups)
        failed = sum(1 for r in rows if r["phase"] == "error")
        _write_meta(out, "bench", started, extra={"sweep_rows": len(rows)})
        print(f"swept {len(rows)} configs ({failed} failed), "
              f"wrote {out / 'sweep.csv'}")
        return 0

    bench = config.bench_config()
    records = [run_benchmark(bench, repeats=args.repeats, warmups=args.warmups)]
    if args.dense_baseline and bench.sigma != 1:
        records.append(run_benchmark(dataclasses.replace(bench, sigma=1),
                                     repeats=args.repeats, warmups=args.warmups))
    rows = [r.to_rows(phase_names=("forward",))[0] for r in records]
    write_benchmark_csv(rows, out / "bench.csv")
    write_benchmark_json([r.to_dict() for r in records], out / "bench.json")
    _write_meta(out, "bench", started)
    for r in records:
        print(f"sigma={r.config.sigma}: forward x{r.speedup['forward']:.2f}, "
              f"attention x{r.speedup['attention']:.2f} vs dense "
              f"(median {r.phases['forward'].median_s:.4f}s over {r.repeats} runs)")
    print(f"wrote {out / 'bench.csv'}")
    return 0


def cmd_analyze(config: RunConfig, args) -> int:
    started = time.perf_counter()
    if args.k_report > args.k_pool:
        raise ConfigError(f"--k-report {args.k_report} exceeds --k-pool {args.k_pool}")
    layers = (_parse_layers(args.layers) if args.layers
              else [config.num_global - 1])
    model, batch = _build_model_and_batch(config)
    formats = set(config.output.formats)

    out = _prepare_outdir(config)
    attn_dir = out / "attn"
    attn_dir.mkdir(exist_ok=True)

    stats = layer_stats(model, batch, k=args.k_report)
    if "csv" in formats:
        write_stats_csv(stats, out / "stats.csv")
        print(f"wrote {out / 'stats.csv'} ({len(stats)} layers)")

    grids = (config.data.N, config.data.n_h, config.data.n_w)
    for layer in layers:
        matrix = head_avg_patch_attention(model, batch, layer)
        if "f32" in formats:
            write_attention_dump(matrix, attn_dir / f"layer_{layer:02d}.f32",
                                 layer=layer, N=config.data.N,
                                 n_h=config.data.n_h, n_w=config.data.n_w)
        if "jsonl" in formats:
            entries = topk_entries(matrix, args.k_report, grids)
            write_topk_jsonl(entries, attn_dir / f"topk_layer_{layer:02d}.jsonl")
        report = rotation_consistency(model, batch, layer, args.k_pool,
                                      args.k_report, mode=args.rotation_mode)
        if "json" in formats:
            _write_json(report.to_dict(), attn_dir / f"rotation_layer_{layer:02d}.json")
        print(f"layer {layer}: rotation overlap {report.overlap_fraction:.3f} "
              f"({args.rotation_mode})")

    _write_meta(out, "analyze", started)
    print(f"wrote {attn_dir}")
    return 0


def _parse_layers(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise ConfigError(f"--layers: {exc}") from exc


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sgattn",
        description="Subsampled global attention: schedules, verification, "
                    "benchmarks, and attention forensics on synthetic stacks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML config file")

    p = sub.add_parser("schedule", help="print and write the layer schedule")
    common(p)

    p = sub.add_parser("verify", help="kernel-vs-oracle and degeneracy checks")
    common(p)
    p.add_argument("--cases", type=int, default=100)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--inject-fault", action="store_true",
                   help="perturb one output to prove the harness can fail")

    p = sub.add_parser("bench", help="time the scheduled forward vs dense")
    common(p)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--warmups", type=int, default=2)
    p.add_argument("--sweep", help="TOML sweep file; one CSV row per config")
    p.add_argument("--dense-baseline", action="store_true",
                   help="also time the sigma=1 comparison row")

    p = sub.add_parser("analyze", help="attention matrices, top-k, rotation test")
    common(p)
    p.add_argument("--layers", help="comma-separated global layer indices")
    p.add_argument("--k-pool", type=int, default=1000)
    p.add_argument("--k-report", type=int, default=50)
    p.add_argument("--rotation-mode", choices=[ROTATE_RE_ENCODE, ROTATE_RELABEL],
                   default=ROTATE_RE_ENCODE)

    return parser


_COMMANDS = {
    "schedule": cmd_schedule,
    "verify": cmd_verify,
    "bench": cmd_bench,
    "analyze": cmd_analyze,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extras = parser.parse_known_args(argv)
    try:
        overrides = parse_overrides(extras)
        config = load_config(args.config, overrides)
        with threadpool_limits(limits=worker_count()):
            return _COMMANDS[args.command](config, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
