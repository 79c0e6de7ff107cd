"""Subsampled global attention: one shared softmax over kept columns, an
optional per-query diagonal term, and an optional mean-fill pair.

The fast kernel streams three logit groups (kept, diagonal, mean) through a
running max and running sums, normalizing once at the end. The oracle
rebuilds the augmented key/value list per query and runs 64-bit dense
attention on it; the two paths share no softmax code.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from sgattn.core import TokenBatch, dense_mha, init_tokens, ModelConfig, patch_row_indices
from sgattn.subsample import (
    MEAN_SCOPE_GLOBAL,
    MEAN_SCOPE_PER_FRAME,
    SCORE,
    STRATEGIES,
    KVSelection,
    SubsampleSpec,
    select_kv,
)

_ROW_CHUNK = 4096


@dataclass
class MeanPair:
    """Mean of the dropped K/V rows; exact 64-bit accumulation, then cast."""

    k_bar: np.ndarray
    v_bar: np.ndarray
    count: int


@dataclass
class SgaStats:
    """Per-query component masses taken from the kernel's own accumulators.

    kept_mass + diag_mass + mean_mass is the total softmax weight per query
    and must be 1 up to rounding; the checks read these fields rather than
    recomputing a softmax.
    """

    kept_mass: np.ndarray
    diag_mass: np.ndarray
    mean_mass: np.ndarray

    @property
    def total_mass(self) -> np.ndarray:
        return self.kept_mass + self.diag_mass + self.mean_mass


@dataclass
class SgaPlan:
    """Row-index bookkeeping for one (batch element, layer) kernel call."""

    N: int
    L: int
    num_special: int
    selections: list[KVSelection]
    kept_rows: np.ndarray
    dropped_rows: np.ndarray
    dropped_mask: np.ndarray = field(repr=False)
    # mean_pool synthesized columns: global row groups to average, frame-major
    # window order; empty list when the strategy synthesizes nothing.
    synth_groups: list[np.ndarray] = field(default_factory=list)
    diagonal: bool = True
    mean_fill: bool = True
    mean_scope: str = MEAN_SCOPE_GLOBAL
    count_weighted_mean: bool = False

    @property
    def num_rows(self) -> int:
        return self.N * self.L

    @property
    def num_kept_columns(self) -> int:
        return len(self.kept_rows) + len(self.synth_groups)


def build_plan(
    batch: TokenBatch,
    spec: SubsampleSpec,
    score_maps: np.ndarray | None = None,
    batch_index: int = 0,
) -> SgaPlan:
    """Run per-frame selection and assemble the global row-index plan."""
    N, L, ns = batch.N, batch.L, batch.num_special
    selections = []
    kept_rows: list[np.ndarray] = []
    dropped_rows: list[np.ndarray] = []
    synth_groups: list[np.ndarray] = []
    for f in range(N):
        score_map = None
        if spec.strategy == SCORE and score_maps is not None:
            score_map = np.asarray(score_maps)[f]
        sel = select_kv(batch, spec, f, score_map=score_map, batch_index=batch_index)
        selections.append(sel)
        base = f * L
        kept_rows.append(np.arange(base, base + ns, dtype=np.int64))
        kept_rows.append(base + ns + sel.kept)
        dropped_rows.append(base + ns + sel.dropped)
        if sel.windows is not None:
            synth_groups.extend(base + ns + w for w in sel.windows)

    kept = np.concatenate(kept_rows)
    dropped = np.concatenate(dropped_rows) if dropped_rows else np.empty(0, dtype=np.int64)
    mask = np.zeros(N * L, dtype=bool)
    mask[dropped] = True
    return SgaPlan(
        N=N,
        L=L,
        num_special=ns,
        selections=selections,
        kept_rows=kept,
        dropped_rows=dropped,
        dropped_mask=mask,
        synth_groups=synth_groups,
        diagonal=spec.diagonal,
        mean_fill=spec.mean_fill,
        mean_scope=spec.mean_scope,
        count_weighted_mean=spec.count_weighted_mean,
    )


def _check_inputs(q, k, v, plan: SgaPlan):
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ValueError("q, k, v must be rank-2 (N*L, d)")
    if not (q.shape == k.shape == v.shape):
        raise ValueError(f"shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    if q.shape[0] != plan.num_rows:
        raise ValueError(f"plan covers {plan.num_rows} rows, tensors have {q.shape[0]}")
    for name, a in (("q", q), ("k", k), ("v", v)):
        if np.isnan(a).any():
            raise ValueError(f"{name} contains NaN")


def _synth_columns(mat: np.ndarray, groups: list[np.ndarray], dtype) -> np.ndarray:
    """Per-window means of K or V rows, 64-bit accumulation.

    Projections are linear with no bias, so averaging projected rows equals
    projecting the averaged tokens the selection reported.
    """
    out = np.empty((len(groups), mat.shape[1]), dtype=dtype)
    for i, g in enumerate(groups):
        out[i] = mat[g].mean(axis=0, dtype=np.float64)
    return out


def _mean_pairs(k: np.ndarray, v: np.ndarray, plan: SgaPlan, dtype) -> list[MeanPair]:
    """Mean-fill pairs over dropped patch rows: one pooled pair, or one per
    frame when mean_scope is per_frame. Empty when nothing was dropped."""
    if not plan.mean_fill or plan.dropped_rows.size == 0:
        return []
    if plan.mean_scope == MEAN_SCOPE_GLOBAL:
        rows = plan.dropped_rows
        return [
            MeanPair(
                k_bar=k[rows].mean(axis=0, dtype=np.float64).astype(dtype),
                v_bar=v[rows].mean(axis=0, dtype=np.float64).astype(dtype),
                count=int(rows.size),
            )
        ]
    pairs = []
    for f in range(plan.N):
        rows = plan.dropped_rows[
            (plan.dropped_rows >= f * plan.L) & (plan.dropped_rows < (f + 1) * plan.L)
        ]
        if rows.size:
            pairs.append(
                MeanPair(
                    k_bar=k[rows].mean(axis=0, dtype=np.float64).astype(dtype),
                    v_bar=v[rows].mean(axis=0, dtype=np.float64).astype(dtype),
                    count=int(rows.size),
                )
            )
    return pairs


def sga_attention(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    plan: SgaPlan,
    return_stats: bool = False,
):
    """Subsampled global attention over (N*L, d) tensors.

    Every query attends to the kept columns, plus its own (k_i, v_i) when the
    diagonal flag is on and row i was dropped (kept queries get no duplicate
    column), plus the mean-fill pair(s) with softmax multiplicity 1 each
    (count-weighted behind the plan flag). All components share one softmax:
    a running max over the groups, then exp-sums joined before the single
    normalization.
    """
    q = np.asarray(q)
    k = np.asarray(k)
    v = np.asarray(v)
    _check_inputs(q, k, v, plan)
    dtype = np.result_type(q.dtype, k.dtype, v.dtype, np.float32)
    q = q.astype(dtype, copy=False)
    k = k.astype(dtype, copy=False)
    v = v.astype(dtype, copy=False)
    d = q.shape[1]
    scale = dtype.type(1.0 / np.sqrt(d))

    k_kept = k[plan.kept_rows]
    v_kept = v[plan.kept_rows]
    if plan.synth_groups:
        k_kept = np.concatenate([k_kept, _synth_columns(k, plan.synth_groups, dtype)])
        v_kept = np.concatenate([v_kept, _synth_columns(v, plan.synth_groups, dtype)])
    kt_kept = np.ascontiguousarray(k_kept.T)

    pairs = _mean_pairs(k, v, plan, dtype)
    if pairs:
        k_means = np.stack([p.k_bar for p in pairs])
        v_means = np.stack([p.v_bar for p in pairs])
        log_mult = (
            np.log(np.array([p.count for p in pairs], dtype=dtype))
            if plan.count_weighted_mean
            else None
        )

    M = q.shape[0]
    out = np.empty((M, d), dtype=dtype)
    kept_mass = np.empty(M, dtype=dtype)
    diag_mass = np.zeros(M, dtype=dtype)
    mean_mass = np.zeros(M, dtype=dtype)

    for start in range(0, M, _ROW_CHUNK):
        sl = slice(start, min(start + _ROW_CHUNK, M))
        qc = q[sl]

        logits = qc @ kt_kept
        logits *= scale
        run_max = logits.max(axis=1)

        if plan.diagonal:
            diag_logit = np.einsum("md,md->m", qc, k[sl]) * scale
            # Mask before the max so kept queries see bit-identical arithmetic
            # whether the flag is on or off.
            diag_logit = np.where(plan.dropped_mask[sl], diag_logit, -np.inf)
            run_max = np.maximum(run_max, diag_logit)
        if pairs:
            mean_logits = (qc @ k_means.T) * scale
            if log_mult is not None:
                mean_logits = mean_logits + log_mult
            run_max = np.maximum(run_max, mean_logits.max(axis=1))

        np.subtract(logits, run_max[:, None], out=logits)
        np.exp(logits, out=logits)
        s_kept = logits.sum(axis=1)
        acc = logits @ v_kept
        denom = s_kept.copy()

        if plan.diagonal:
            e_diag = np.where(plan.dropped_mask[sl], np.exp(diag_logit - run_max), dtype.type(0))
            acc += e_diag[:, None] * v[sl]
            denom += e_diag
            diag_mass[sl] = e_diag
        if pairs:
            e_mean = np.exp(mean_logits - run_max[:, None])
            acc += e_mean @ v_means
            s_mean = e_mean.sum(axis=1)
            denom += s_mean
            mean_mass[sl] = s_mean

        out[sl] = acc / denom[:, None]
        kept_mass[sl] = s_kept / denom
        if plan.diagonal:
            diag_mass[sl] /= denom
        if pairs:
            mean_mass[sl] /= denom

    if return_stats:
        return out, SgaStats(kept_mass=kept_mass, diag_mass=diag_mass, mean_mass=mean_mass)
    return out


def sga_oracle(q: np.ndarray, k: np.ndarray, v: np.ndarray, plan: SgaPlan) -> np.ndarray:
    """Brute-force reference: per query, materialize the full augmented
    key/value list and run 64-bit dense attention on it.

    Count-weighted mean pairs are materialized by replicating the pair, which
    is the definition the kernel's log-multiplicity shortcut must match.
    """
    q = np.asarray(q).astype(np.float64)
    k = np.asarray(k).astype(np.float64)
    v = np.asarray(v).astype(np.float64)
    _check_inputs(q, k, v, plan)

    base_k = [k[plan.kept_rows]]
    base_v = [v[plan.kept_rows]]
    for g in plan.synth_groups:
        base_k.append(k[g].mean(axis=0)[None, :])
        base_v.append(v[g].mean(axis=0)[None, :])
    pairs = _mean_pairs(k, v, plan, np.float64)

    out = np.empty_like(q)
    for i in range(q.shape[0]):
        ks = list(base_k)
        vs = list(base_v)
        if plan.diagonal and plan.dropped_mask[i]:
            ks.append(k[i: i + 1])
            vs.append(v[i: i + 1])
        for p in pairs:
            reps = p.count if plan.count_weighted_mean else 1
            ks.append(np.tile(p.k_bar, (reps, 1)))
            vs.append(np.tile(p.v_bar, (reps, 1)))
        out[i] = dense_mha(q[i: i + 1], np.concatenate(ks), np.concatenate(vs))[0]
    return out


def mean_kv_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Collapse all keys/values to their single mean pair.

    The softmax over one logit is 1 regardless of the query, so every output
    row is the mean value row; q only fixes the output row count.
    """
    q = np.asarray(q)
    k = np.asarray(k)
    v = np.asarray(v)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ValueError("q, k, v must be rank-2")
    if k.shape[0] < 1 or v.shape[0] != k.shape[0]:
        raise ValueError("need at least one key/value row")
    dtype = np.result_type(q.dtype, v.dtype, np.float32)
    v_bar = v.mean(axis=0, dtype=np.float64).astype(dtype)
    return np.tile(v_bar, (q.shape[0], 1))


# ---------------------------------------------------------------------------
# randomized verification sweep (oracle equivalence + accumulator masses)
# ---------------------------------------------------------------------------


@dataclass
class VerificationReport:
    cases: int
    passed: int
    failed: int
    max_rel_err: float
    max_mass_err: float
    tolerance: float
    mass_tolerance: float
    elapsed_s: float
    seed: int
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.failed == 0

    def to_dict(self) -> dict:
        return {
            "cases": self.cases,
            "passed": self.passed,
            "failed": self.failed,
            "max_rel_err": self.max_rel_err,
            "max_mass_err": self.max_mass_err,
            "tolerance": self.tolerance,
            "mass_tolerance": self.mass_tolerance,
            "seed": self.seed,
            "failures": self.failures,
        }


def _row_relative_error(fast: np.ndarray, oracle: np.ndarray) -> float:
    """Max over queries of the inf-norm error relative to the row scale."""
    num = np.abs(fast.astype(np.float64) - oracle).max(axis=1)
    den = np.abs(oracle).max(axis=1) + 1e-12
    return float((num / den).max())


def random_case(rng: np.random.Generator, case_index: int):
    """One randomized kernel instance: batch, spec, q/k/v tensors."""
    mode = rng.choice(["vggt", "pi3"])
    N = int(rng.integers(1, 7))
    n_h = int(rng.integers(1, 9))
    n_w = int(rng.integers(1, 9))
    d = int(rng.choice([4, 8]))
    sigma = int(rng.choice([1, 2, 4, 6, 9]))
    strategy = str(rng.choice(STRATEGIES))
    spec = SubsampleSpec.from_sigma(
        sigma,
        strategy=strategy,
        keep_first_frame_full=bool(mode == "vggt"),
        diagonal=bool(rng.integers(2)),
        mean_fill=bool(rng.integers(2)),
        seed=int(rng.integers(0, 2**31)),
        mean_scope=MEAN_SCOPE_PER_FRAME if rng.random() < 0.25 else MEAN_SCOPE_GLOBAL,
        count_weighted_mean=bool(rng.random() < 0.25),
    )
    cfg = ModelConfig(mode=mode, num_blocks=2, embed_dim=8, num_heads=1)
    batch = init_tokens(cfg, 1, N, n_h, n_w, seed=int(rng.integers(0, 2**31)))
    score_maps = rng.uniform(size=(N, n_h * n_w)) if strategy == SCORE else None
    plan = build_plan(batch, spec, score_maps=score_maps)
    M = N * batch.L
    q, k, v = (rng.uniform(-3, 3, (M, d)).astype(np.float32) for _ in range(3))
    desc = (
        f"case {case_index}: mode={mode} N={N} grid={n_h}x{n_w} d={d} sigma={sigma} "
        f"strategy={strategy} diag={spec.diagonal} mean={spec.mean_fill} "
        f"scope={spec.mean_scope} weighted={spec.count_weighted_mean}"
    )
    return desc, plan, q, k, v


def run_verification(
    cases: int = 100,
    seed: int = 0,
    tolerance: float = 1e-4,
    mass_tolerance: float = 1e-6,
    inject_fault: bool = False,
) -> VerificationReport:
    """Compare the kernel against the oracle on randomized instances.

    inject_fault perturbs one kernel output in the first case, proving the
    harness can actually fail.
    """
    if cases < 1:
        raise ValueError("cases must be >= 1")
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    passed = 0
    max_rel = 0.0
    max_mass = 0.0
    failures: list[str] = []
    for i in range(cases):
        desc, plan, q, k, v = random_case(rng, i)
        fast, stats = sga_attention(q, k, v, plan, return_stats=True)
        if inject_fault and i == 0:
            fast = fast.copy()
            fast[0, 0] += 0.01
        oracle = sga_oracle(q, k, v, plan)
        rel = _row_relative_error(fast, oracle)
        mass = float(np.abs(stats.total_mass.astype(np.float64) - 1.0).max())
        max_rel = max(max_rel, rel)
        max_mass = max(max_mass, mass)
        if rel <= tolerance and mass <= mass_tolerance:
            passed += 1
        else:
            failures.append(f"{desc}: rel_err={rel:.3e} mass_err={mass:.3e}")
    return VerificationReport(
        cases=cases,
        passed=passed,
        failed=cases - passed,
        max_rel_err=max_rel,
        max_mass_err=max_mass,
        tolerance=tolerance,
        mass_tolerance=mass_tolerance,
        elapsed_s=time.perf_counter() - t0,
        seed=seed,
        failures=failures[:20],
    )
