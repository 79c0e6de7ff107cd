"""Patch subsampling: sigma factorization, grid windows, K/V selection strategies.

A selection names, per frame, which patch tokens survive as attention
keys/values. Special tokens are never listed here; they are always kept and
handled by the kernel plan directly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from sgattn.core import PI3_STYLE, VGGT_STYLE, TokenBatch

GRID = "grid"
RANDOM = "random"
HIGH_NORM = "high_norm"
LOW_NORM = "low_norm"
MEAN_POOL = "mean_pool"
SCORE = "score"

STRATEGIES = (GRID, RANDOM, HIGH_NORM, LOW_NORM, MEAN_POOL, SCORE)

# Strategies whose selection depends on current token features and therefore
# drifts across layers unless frozen.
FEATURE_DEPENDENT = (HIGH_NORM, LOW_NORM, MEAN_POOL)

MEAN_SCOPE_GLOBAL = "global"
MEAN_SCOPE_PER_FRAME = "per_frame"


def factorize_sigma(sigma: int) -> tuple[int, int]:
    """Most-square factor pair (s_h, s_w) of sigma with s_h <= s_w."""
    if not isinstance(sigma, (int, np.integer)) or sigma < 1:
        raise ValueError(f"sigma must be a positive integer, got {sigma!r}")
    s_h = 1
    for a in range(1, math.isqrt(int(sigma)) + 1):
        if sigma % a == 0:
            s_h = a
    return s_h, sigma // s_h


def grid_indices(n_h: int, n_w: int, s_h: int, s_w: int) -> np.ndarray:
    """Row-major indices of the first patch of every (s_h x s_w) window, sorted.

    Strides larger than the grid are legal and keep only patch 0.
    """
    if min(n_h, n_w, s_h, s_w) < 1:
        raise ValueError("grid dims and strides must be >= 1")
    rows = np.arange(0, n_h, s_h, dtype=np.int64)
    cols = np.arange(0, n_w, s_w, dtype=np.int64)
    return (rows[:, None] * n_w + cols[None, :]).reshape(-1)


def grid_kept_count(n_h: int, n_w: int, s_h: int, s_w: int) -> int:
    return math.ceil(n_h / s_h) * math.ceil(n_w / s_w)


def window_members(n_h: int, n_w: int, s_h: int, s_w: int) -> list[np.ndarray]:
    """Patch indices of each window, windows in row-major order.

    Edge windows are clipped by the grid; every patch belongs to exactly one
    window.
    """
    out = []
    for r0 in range(0, n_h, s_h):
        for c0 in range(0, n_w, s_w):
            rows = np.arange(r0, min(r0 + s_h, n_h), dtype=np.int64)
            cols = np.arange(c0, min(c0 + s_w, n_w), dtype=np.int64)
            out.append((rows[:, None] * n_w + cols[None, :]).reshape(-1))
    return out


@dataclass(frozen=True)
class SubsampleSpec:
    """How to thin the K/V set of a subsampled global layer.

    diagonal adds the query's own key/value back when its row was dropped;
    mean_fill adds one key/value pair equal to the mean over all dropped
    patch rows. Both default on. mean_scope/count_weighted_mean are study
    knobs for the mean component: one pooled pair over all frames (default)
    versus one pair per frame, and softmax multiplicity 1 (default) versus
    weighting the mean logit by the dropped-row count.
    """

    sigma: int
    s_h: int
    s_w: int
    strategy: str = GRID
    keep_first_frame_full: bool = True
    diagonal: bool = True
    mean_fill: bool = True
    seed: int = 0
    mean_scope: str = MEAN_SCOPE_GLOBAL
    count_weighted_mean: bool = False
    # Feature-dependent strategies re-select per layer unless frozen at the
    # first subsampled layer.
    freeze_selection: bool = False

    def __post_init__(self):
        if self.sigma < 1:
            raise ValueError(f"sigma must be >= 1, got {self.sigma}")
        if self.s_h * self.s_w != self.sigma:
            raise ValueError(
                f"s_h*s_w = {self.s_h}*{self.s_w} does not equal sigma = {self.sigma}"
            )
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}, expected one of {STRATEGIES}")
        if self.mean_scope not in (MEAN_SCOPE_GLOBAL, MEAN_SCOPE_PER_FRAME):
            raise ValueError(f"unknown mean_scope {self.mean_scope!r}")

    @classmethod
    def from_sigma(cls, sigma: int, **overrides) -> "SubsampleSpec":
        s_h, s_w = factorize_sigma(sigma)
        return cls(sigma=sigma, s_h=s_h, s_w=s_w, **overrides)

    def with_overrides(self, **kw) -> "SubsampleSpec":
        return replace(self, **kw)


def default_keep_first_frame_full(mode: str) -> bool:
    """vggt keeps the reference frame uncompressed; pi3 subsamples uniformly."""
    return {VGGT_STYLE: True, PI3_STYLE: False}[mode]


@dataclass
class KVSelection:
    """Kept/dropped patch split for one frame, in frame-local patch indices."""

    frame: int
    kept: np.ndarray
    dropped: np.ndarray
    # mean_pool only: one synthesized token row per window, and the window
    # membership needed to rebuild those rows in projected K/V space.
    synthesized: np.ndarray | None = None
    windows: list[np.ndarray] | None = None

    def __post_init__(self):
        self.kept = np.asarray(self.kept, dtype=np.int64)
        self.dropped = np.asarray(self.dropped, dtype=np.int64)


def _one_per_window(windows: list[np.ndarray], pick) -> np.ndarray:
    return np.sort(np.array([pick(w) for w in windows], dtype=np.int64))


def select_kv(
    batch: TokenBatch,
    spec: SubsampleSpec,
    frame: int,
    score_map: np.ndarray | None = None,
    batch_index: int = 0,
) -> KVSelection:
    """Select kept patch tokens for one frame under the given strategy.

    score: requires score_map with n_h*n_w entries; takes the top grid-count
    patches frame-wide, ignoring windows. All ties break to the lowest patch
    index.
    """
    if not 0 <= frame < batch.N:
        raise ValueError(f"frame {frame} out of range for N={batch.N}")
    T = batch.num_patches
    all_patches = np.arange(T, dtype=np.int64)

    if spec.keep_first_frame_full and frame == 0:
        return KVSelection(frame, kept=all_patches, dropped=np.empty(0, dtype=np.int64))
    if spec.sigma == 1:
        # Every strategy degenerates to keeping all patches, mean_pool included
        # (its per-window means would be the patches themselves).
        return KVSelection(frame, kept=all_patches, dropped=np.empty(0, dtype=np.int64))

    windows = window_members(batch.n_h, batch.n_w, spec.s_h, spec.s_w)

    if spec.strategy == GRID:
        kept = grid_indices(batch.n_h, batch.n_w, spec.s_h, spec.s_w)
    elif spec.strategy == RANDOM:
        def pick(i_w):
            # Stream keyed by (seed, frame, window): reproducible and frame-local.
            ss = np.random.SeedSequence(entropy=spec.seed, spawn_key=(frame, i_w))
            rng = np.random.Generator(np.random.Philox(ss))
            w = windows[i_w]
            return w[rng.integers(len(w))]
        kept = np.sort(np.array([pick(i) for i in range(len(windows))], dtype=np.int64))
    elif spec.strategy in (HIGH_NORM, LOW_NORM):
        feats = batch.data[batch_index, frame, batch.num_special:, :]
        norms = np.linalg.norm(feats.astype(np.float64), axis=1)
        if spec.strategy == LOW_NORM:
            norms = -norms
        # argmax returns the first maximum; window indices are sorted, so ties
        # resolve to the lowest patch index.
        kept = _one_per_window(windows, lambda w: w[int(np.argmax(norms[w]))])
    elif spec.strategy == MEAN_POOL:
        feats = batch.data[batch_index, frame, batch.num_special:, :]
        synth = np.stack([feats[w].mean(axis=0, dtype=np.float64) for w in windows])
        return KVSelection(
            frame,
            kept=np.empty(0, dtype=np.int64),
            dropped=all_patches,
            synthesized=synth.astype(batch.data.dtype),
            windows=windows,
        )
    elif spec.strategy == SCORE:
        if score_map is None:
            raise ValueError("score strategy requires a score_map")
        scores = np.asarray(score_map, dtype=np.float64).reshape(-1)
        if scores.shape[0] != T:
            raise ValueError(f"score_map has {scores.shape[0]} entries, expected {T}")
        k = grid_kept_count(batch.n_h, batch.n_w, spec.s_h, spec.s_w)
        order = np.argsort(-scores, kind="stable")  # stable: ties to lowest index
        kept = np.sort(order[:k])
    else:  # pragma: no cover - guarded by SubsampleSpec validation
        raise ValueError(f"unknown strategy {spec.strategy!r}")

    dropped = np.setdiff1d(all_patches, kept, assume_unique=False)
    return KVSelection(frame, kept=kept, dropped=dropped)


def load_score_maps(path: str | Path, N: int, num_patches: int) -> np.ndarray:
    """Read per-frame score maps: a JSON array of N arrays, each n_h*n_w
    numbers in row-major patch order."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, list) or len(raw) != N:
        raise ValueError(f"score map file must hold {N} per-frame arrays")
    maps = np.asarray(raw, dtype=np.float64)
    if maps.shape != (N, num_patches):
        raise ValueError(
            f"score maps have shape {maps.shape}, expected ({N}, {num_patches})"
        )
    return maps
