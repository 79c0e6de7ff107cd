"""Attention forensics on the toy aggregator.

Probes recompute the forward pass in float64 with order-canonical reductions:
projections and logits accumulate with a fixed element order (einsum), and
every softmax denominator or weighted sum sorts its addends before adding.
The captured probabilities are therefore invariant, bit for bit, under any
permutation of token rows, which is what makes the grid-reversal relabeling
check an exact conjugation instead of an approximate one.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._io import atomic_write_bytes, atomic_write_text
from .aggregator import DENSE_GLOBAL, FRAME_CONVERTED, SUBSAMPLED, LayerMode, LayerSchedule
from .core import Model, TokenBatch, layer_norm, patch_row_indices, sinusoidal_grid_embedding
from .sga import SgaPlan, _mean_pairs, _synth_columns, build_plan, mean_kv_attention, sga_attention
from .subsample import HIGH_NORM, LOW_NORM

DEFAULT_ELEMENT_BUDGET = 1 << 28
_CHUNK_ELEMENTS = 1 << 21

ROTATE_RE_ENCODE = "re_encode"
ROTATE_RELABEL = "relabel"


# ---------------------------------------------------------------- entries

@dataclass(frozen=True)
class AttentionEntry:
    """One attention weight with grid coordinates on both sides."""

    query: tuple[int, int, int]  # (frame, row, col)
    key: tuple[int, int, int]
    weight: float
    is_self: bool

    def to_record(self) -> dict:
        qf, qr, qc = self.query
        kf, kr, kc = self.key
        return {
            "qf": qf, "qr": qr, "qc": qc,
            "kf": kf, "kr": kr, "kc": kc,
            "w": self.weight, "self": self.is_self,
        }


@dataclass(frozen=True)
class LayerAttentionStats:
    layer: int
    max_weight: float
    entropy: float
    self_frac: float
    aligned_frac: float


@dataclass
class SubsampledAttentionProbe:
    """Probe of a subsampled layer: the dense matrix does not exist, so the
    kept-column rectangle and the diagonal/mean columns are reported apart."""

    layer: int
    matrix: np.ndarray  # (N*T, n_kept_patch_cols) head-averaged probabilities
    key_patch_slots: np.ndarray  # global patch slot of each rectangle column
    diagonal: np.ndarray | None  # (N*T,) per-query self column, 0 where kept
    mean_columns: np.ndarray | None  # (N*T, n_pairs)
    synth_columns: np.ndarray | None  # (N*T, n_windows) for mean_pool plans


@dataclass
class RotationReport:
    layer: int
    mode: str
    k_pool: int
    k_report: int
    overlap_fraction: float
    num_shared: int
    entries_a: list[AttentionEntry]
    entries_b: list[AttentionEntry]  # run B, coordinates mapped back
    matrix_a: np.ndarray = field(repr=False)
    matrix_b: np.ndarray = field(repr=False)  # run B, unmapped

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "mode": self.mode,
            "k_pool": self.k_pool,
            "k_report": self.k_report,
            "overlap_fraction": self.overlap_fraction,
            "num_shared": self.num_shared,
            "entries_a": [e.to_record() for e in self.entries_a],
            "entries_b": [e.to_record() for e in self.entries_b],
        }


# ------------------------------------------------- canonical reductions

def _sorted_sum(x: np.ndarray, axis: int) -> np.ndarray:
    return np.sort(x, axis=axis).sum(axis=axis)


def _proj(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # einsum without BLAS dispatch: per-element sequential accumulation,
    # identical for every row position.
    return np.einsum("ic,ck->ik", x, w)


def _canon_probs(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    return ex / _sorted_sum(ex, axis=1)[:, None]


def _canon_weighted_sum(p: np.ndarray, v: np.ndarray) -> np.ndarray:
    """sum_j p[i,j] v[j,:] with per-element sorted addends."""
    M, K = p.shape
    d = v.shape[1]
    out = np.empty((M, d), dtype=np.float64)
    chunk = max(1, _CHUNK_ELEMENTS // max(1, K * d))
    for s in range(0, M, chunk):
        sl = slice(s, min(s + chunk, M))
        prod = p[sl][:, :, None] * v[None, :, :]
        out[sl] = np.sort(prod, axis=1).sum(axis=1)
    return out


def _canon_mha(q: np.ndarray, k: np.ndarray, v: np.ndarray):
    scale = 1.0 / math.sqrt(q.shape[1])
    logits = np.einsum("id,jd->ij", q, k) * scale
    p = _canon_probs(logits)
    return _canon_weighted_sum(p, v), p


def _sga_probs(qh, kh, vh, plan: SgaPlan):
    """Shared-softmax probabilities of the subsampled kernel, by component."""
    scale = 1.0 / math.sqrt(qh.shape[1])
    k_cols = kh[plan.kept_rows]
    if plan.synth_groups:
        k_cols = np.concatenate([k_cols, _synth_columns(kh, plan.synth_groups, np.float64)])
    logits = qh @ k_cols.T * scale
    run_max = logits.max(axis=1, keepdims=True) if logits.shape[1] else np.full(
        (qh.shape[0], 1), -np.inf
    )

    diag = None
    if plan.diagonal:
        diag = np.einsum("md,md->m", qh, kh) * scale
        diag = np.where(plan.dropped_mask, diag, -np.inf)
        run_max = np.maximum(run_max, diag[:, None])

    pairs = _mean_pairs(kh, vh, plan, np.float64)
    mean_logits = None
    if pairs:
        k_bar = np.stack([p.k_bar for p in pairs])
        mean_logits = qh @ k_bar.T * scale
        if plan.count_weighted_mean:
            mean_logits = mean_logits + np.log([p.count for p in pairs])[None, :]
        run_max = np.maximum(run_max, mean_logits.max(axis=1, keepdims=True))

    e_cols = np.exp(logits - run_max)
    denom = e_cols.sum(axis=1)
    e_diag = None
    if diag is not None:
        e_diag = np.where(np.isfinite(diag), np.exp(diag - run_max[:, 0]), 0.0)
        denom = denom + e_diag
    e_mean = None
    if mean_logits is not None:
        e_mean = np.exp(mean_logits - run_max)
        denom = denom + e_mean.sum(axis=1)

    p_cols = e_cols / denom[:, None]
    p_diag = e_diag / denom if e_diag is not None else None
    p_mean = e_mean / denom[:, None] if e_mean is not None else None
    n_kept = len(plan.kept_rows)
    return p_cols[:, :n_kept], p_cols[:, n_kept:], p_diag, p_mean


# ------------------------------------------------------- probe forward

def global_block_index(config, layer: int) -> int:
    """Model block index of global layer `layer`."""
    if not 0 <= layer < config.num_global:
        raise ValueError(f"global layer index {layer} outside [0, {config.num_global})")
    seen = -1
    for i in range(config.num_blocks):
        if config.is_global_block(i):
            seen += 1
            if seen == layer:
                return i
    raise AssertionError("unreachable")


def _weights64(w):
    return dataclasses.replace(
        w, **{f.name: getattr(w, f.name).astype(np.float64) for f in dataclasses.fields(w)}
    )


def probe_attention_matrices(
    model: Model,
    batch: TokenBatch,
    layers,
    *,
    schedule: LayerSchedule | None = None,
    score_maps: np.ndarray | None = None,
    batch_index: int = 0,
    element_budget: int = DEFAULT_ELEMENT_BUDGET,
) -> dict:
    """Head-averaged post-softmax attention at the requested global layers.

    Returns {layer: (M, M) float64 matrix} over all tokens for dense layers,
    or {layer: SubsampledAttentionProbe} where the schedule subsamples. The
    probed element must execute global attention (dense or subsampled).
    """
    cfg = model.config
    layers = sorted(set(int(x) for x in layers))
    for g in layers:
        global_block_index(cfg, g)  # range check
    if schedule is not None and schedule.num_global != cfg.num_global:
        raise ValueError(
            f"schedule covers {schedule.num_global} global layers, model has {cfg.num_global}"
        )

    N, L, C = batch.N, batch.L, batch.C
    M = N * L
    for g in layers:
        mode = schedule.modes[g] if schedule is not None else LayerMode.dense_global()
        if mode.kind not in (DENSE_GLOBAL, SUBSAMPLED):
            raise ValueError(f"layer {g} runs {mode.kind}; only global attention is probeable")
        need = M * M
        if need > element_budget:
            raise ValueError(
                f"probe at layer {g} needs {need} matrix elements, over the budget of "
                f"{element_budget}; raise element_budget to allow this"
            )

    x = batch.data[batch_index].astype(np.float64).reshape(M, C)
    H = cfg.num_heads
    dh = C // H
    captured: dict = {}
    plan_cache: dict = {}
    g = -1
    last = layers[-1] if layers else -1

    for i in range(cfg.num_blocks):
        w = _weights64(model.blocks[i])
        is_global = cfg.is_global_block(i)
        mode = None
        if is_global:
            g += 1
            if g > last:
                break
            mode = schedule.modes[g] if schedule is not None else LayerMode.dense_global()

        h = layer_norm(x, w.attn_norm_scale, w.attn_norm_bias)
        q, k, v = _proj(h, w.wq), _proj(h, w.wk), _proj(h, w.wv)
        ctx = np.empty_like(x)
        capture = is_global and g in layers

        plan = None
        if is_global and mode.kind == SUBSAMPLED:
            plan = plan_cache.get(mode.spec)
            if plan is None:
                frame = TokenBatch(
                    x.reshape(1, N, L, C), batch.n_h, batch.n_w,
                    batch.num_special, batch.special_layout,
                )
                plan = build_plan(frame, mode.spec, score_maps=score_maps)
                reusable = mode.spec.strategy not in (HIGH_NORM, LOW_NORM) or (
                    mode.spec.freeze_selection
                )
                if reusable:
                    plan_cache[mode.spec] = plan

        probs_sum = None
        rect_sum = synth_sum = diag_sum = mean_sum = None
        for head in range(H):
            sl = slice(head * dh, (head + 1) * dh)
            qh, kh, vh = q[:, sl], k[:, sl], v[:, sl]
            if not is_global or mode.kind == FRAME_CONVERTED:
                for f in range(N):
                    rows = slice(f * L, (f + 1) * L)
                    ctx[rows, sl], _ = _canon_mha(qh[rows], kh[rows], vh[rows])
            elif mode.kind == DENSE_GLOBAL:
                ctx[:, sl], p = _canon_mha(qh, kh, vh)
                if capture:
                    probs_sum = p if probs_sum is None else probs_sum + p
            elif mode.kind == SUBSAMPLED:
                ctx[:, sl] = sga_attention(qh, kh, vh, plan)
                if capture:
                    p_k, p_s, p_d, p_m = _sga_probs(qh, kh, vh, plan)
                    rect_sum = p_k if rect_sum is None else rect_sum + p_k
                    synth_sum = p_s if synth_sum is None else synth_sum + p_s
                    if p_d is not None:
                        diag_sum = p_d if diag_sum is None else diag_sum + p_d
                    if p_m is not None:
                        mean_sum = p_m if mean_sum is None else mean_sum + p_m
            else:  # mean_kv: a single pooled pair takes all the mass
                ctx[:, sl] = mean_kv_attention(qh, kh, vh)

        if capture:
            if mode.kind == DENSE_GLOBAL:
                captured[g] = probs_sum / H
            else:
                captured[g] = _restrict_subsampled(
                    g, plan, rect_sum / H, synth_sum / H,
                    None if diag_sum is None else diag_sum / H,
                    None if mean_sum is None else mean_sum / H,
                    batch,
                )

        x = x + _proj(ctx, w.wo)
        h2 = layer_norm(x, w.mlp_norm_scale, w.mlp_norm_bias)
        x = x + _proj(np.tanh(_proj(h2, w.mlp_w1) + w.mlp_b1), w.mlp_w2) + w.mlp_b2

    return captured


def _restrict_subsampled(g, plan, rect, synth, diag, mean, batch) -> SubsampledAttentionProbe:
    patch_rows = patch_row_indices(plan.N, plan.L, plan.num_special)
    kept = plan.kept_rows
    col_is_patch = (kept % plan.L) >= plan.num_special
    kept_patch = kept[col_is_patch]
    slot = (kept_patch // plan.L) * (plan.L - plan.num_special) + (
        kept_patch % plan.L - plan.num_special
    )
    return SubsampledAttentionProbe(
        layer=g,
        matrix=rect[np.ix_(patch_rows, np.flatnonzero(col_is_patch))],
        key_patch_slots=slot,
        diagonal=None if diag is None else diag[patch_rows],
        mean_columns=None if mean is None else mean[patch_rows],
        synth_columns=synth[patch_rows] if synth.shape[1] else None,
    )


def head_avg_patch_attention(
    model: Model,
    batch: TokenBatch,
    layer: int,
    *,
    schedule: LayerSchedule | None = None,
    score_maps: np.ndarray | None = None,
    batch_index: int = 0,
    element_budget: int = DEFAULT_ELEMENT_BUDGET,
):
    """Post-softmax attention at one global layer, averaged over heads and
    restricted to patch tokens. Rows of the restriction no longer sum to 1;
    the special-token mass stays in the (discarded) columns.

    Dense layers return an (N*T, N*T) float64 matrix. Subsampled layers
    return a SubsampledAttentionProbe instead.
    """
    out = probe_attention_matrices(
        model, batch, [layer],
        schedule=schedule, score_maps=score_maps,
        batch_index=batch_index, element_budget=element_budget,
    )[layer]
    if isinstance(out, SubsampledAttentionProbe):
        return out
    patch_rows = patch_row_indices(batch.N, batch.L, batch.num_special)
    return out[np.ix_(patch_rows, patch_rows)]


# ------------------------------------------------------------ statistics

def topk_entries(matrix: np.ndarray, k: int, grids: tuple[int, int, int]) -> list[AttentionEntry]:
    """k largest entries of a patch-restricted matrix, ties broken by
    lexicographic (query, key) flat index."""
    if k < 1:
        raise ValueError("k must be >= 1")
    N, n_h, n_w = grids
    T = n_h * n_w
    if matrix.shape != (N * T, N * T):
        raise ValueError(f"matrix shape {matrix.shape} does not match N*T={N * T}")
    flat = np.asarray(matrix).ravel()
    order = np.argsort(-flat, kind="stable")[: min(k, flat.size)]
    entries = []
    for idx in order:
        qi, ki = divmod(int(idx), N * T)
        qf, qt = divmod(qi, T)
        kf, kt = divmod(ki, T)
        query = (qf, qt // n_w, qt % n_w)
        key = (kf, kt // n_w, kt % n_w)
        entries.append(
            AttentionEntry(query=query, key=key, weight=float(flat[idx]), is_self=query == key)
        )
    return entries


def layer_stats(
    model: Model,
    batch: TokenBatch,
    *,
    k: int = 50,
    batch_index: int = 0,
    element_budget: int = DEFAULT_ELEMENT_BUDGET,
) -> list[LayerAttentionStats]:
    """Uniformity statistics for every global layer under a dense probe.

    Row entropy is taken over full softmax rows (all N*L keys) and averaged
    over patch-token queries; max weight and the top-k fractions are read
    from the patch-restricted matrix.
    """
    cfg = model.config
    mats = probe_attention_matrices(
        model, batch, range(cfg.num_global),
        batch_index=batch_index, element_budget=element_budget,
    )
    patch_rows = patch_row_indices(batch.N, batch.L, batch.num_special)
    grids = (batch.N, batch.n_h, batch.n_w)
    out = []
    for g in range(cfg.num_global):
        full = mats[g]
        rows = full[patch_rows]
        ent = float(np.mean(-np.sum(np.where(rows > 0, rows * np.log(rows), 0.0), axis=1)))
        restricted = rows[:, patch_rows]
        entries = topk_entries(restricted, k, grids)
        n = len(entries)
        self_frac = sum(e.is_self for e in entries) / n
        aligned = sum(
            e.query[0] != e.key[0] and e.query[1:] == e.key[1:] for e in entries
        )
        out.append(
            LayerAttentionStats(
                layer=g,
                max_weight=float(restricted.max()),
                entropy=ent,
                self_frac=self_frac,
                aligned_frac=aligned / n,
            )
        )
    return out


# ----------------------------------------------------------- rotation test

def reversal_permutation(n_h: int, n_w: int) -> np.ndarray:
    """Patch slot permutation of the 180-degree grid reversal:
    (r, c) -> (n_h-1-r, n_w-1-c), which is a flat reversal."""
    return np.arange(n_h * n_w)[::-1].copy()


def frame_reversal_indices(N: int, n_h: int, n_w: int) -> np.ndarray:
    """Global patch-slot permutation applying the reversal inside each frame."""
    T = n_h * n_w
    rev = reversal_permutation(n_h, n_w)
    return np.concatenate([f * T + rev for f in range(N)])


def rotate_batch(batch: TokenBatch, *, re_encode: bool) -> TokenBatch:
    """Reverse every frame's patch grid.

    re_encode=True models a rotated image passed back through the encoder:
    token content moves to the mirrored slot while the additive sinusoidal
    position table stays with the slot. re_encode=False relocates tokens
    verbatim (a pure relabeling, useful only as a conjugation oracle).
    """
    ns = batch.num_special
    data = batch.data.copy()
    patches = data[:, :, ns:, :]
    reversed_patches = patches[:, :, ::-1, :]
    if re_encode:
        pos = sinusoidal_grid_embedding(batch.n_h, batch.n_w, batch.C).astype(data.dtype)
        data[:, :, ns:, :] = reversed_patches - pos[::-1] + pos
    else:
        data[:, :, ns:, :] = reversed_patches
    return batch.replace_data(data)


def rotation_consistency(
    model: Model,
    batch: TokenBatch,
    layer: int,
    k_pool: int = 1000,
    k_report: int = 50,
    *,
    mode: str = ROTATE_RE_ENCODE,
    batch_index: int = 0,
    element_budget: int = DEFAULT_ELEMENT_BUDGET,
) -> RotationReport:
    """Compare top attention pairs before and after the grid reversal.

    Run B's coordinates are mapped back through the reversal; among run-A
    entries whose query also appears in run B's pool, the top k_report are
    checked for an exactly matching key.
    """
    if k_report > k_pool:
        raise ValueError(f"k_report={k_report} exceeds k_pool={k_pool}")
    if mode not in (ROTATE_RE_ENCODE, ROTATE_RELABEL):
        raise ValueError(f"unknown rotation mode {mode!r}")

    kw = dict(batch_index=batch_index, element_budget=element_budget)
    mat_a = head_avg_patch_attention(model, batch, layer, **kw)
    rotated = rotate_batch(batch, re_encode=(mode == ROTATE_RE_ENCODE))
    mat_b = head_avg_patch_attention(model, rotated, layer, **kw)

    rev = frame_reversal_indices(batch.N, batch.n_h, batch.n_w)
    mapped_b = mat_b[np.ix_(rev, rev)]

    grids = (batch.N, batch.n_h, batch.n_w)
    entries_a = topk_entries(mat_a, k_pool, grids)
    entries_b = topk_entries(mapped_b, k_pool, grids)
    b_queries = {e.query for e in entries_b}
    b_pairs = {(e.query, e.key) for e in entries_b}
    shared = [e for e in entries_a if e.query in b_queries][:k_report]
    matched = sum((e.query, e.key) in b_pairs for e in shared)
    return RotationReport(
        layer=layer,
        mode=mode,
        k_pool=k_pool,
        k_report=k_report,
        overlap_fraction=matched / len(shared) if shared else 0.0,
        num_shared=len(shared),
        entries_a=entries_a,
        entries_b=entries_b,
        matrix_a=mat_a,
        matrix_b=mat_b,
    )


# ----------------------------------------------------------------- exports

def write_attention_dump(
    matrix: np.ndarray, path: str | Path, *, layer: int, N: int, n_h: int, n_w: int
) -> None:
    """Row-major little-endian float32 binary plus a JSON sidecar."""
    path = Path(path)
    payload = np.ascontiguousarray(matrix, dtype="<f4").tobytes()
    atomic_write_bytes(path, payload)
    sidecar = {"layer": layer, "N": N, "n_h": n_h, "n_w": n_w, "heads_averaged": True}
    atomic_write_text(path.with_suffix(".json"), json.dumps(sidecar, indent=2) + "\n")


def read_attention_dump(path: str | Path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    side = meta["N"] * meta["n_h"] * meta["n_w"]
    return raw.reshape(side, -1), meta


def write_topk_jsonl(entries: list[AttentionEntry], path: str | Path) -> None:
    lines = "".join(json.dumps(e.to_record()) + "\n" for e in entries)
    atomic_write_text(path, lines)


def write_stats_csv(stats: list[LayerAttentionStats], path: str | Path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["layer", "max_w", "entropy", "self_frac", "aligned_frac"])
    for s in stats:
        writer.writerow(
            [s.layer, repr(s.max_weight), repr(s.entropy), repr(s.self_frac), repr(s.aligned_frac)]
        )
    atomic_write_text(path, buf.getvalue())
