"""Deterministic tensor core: token batches, toy aggregator weights, dense attention.

Everything here is plain numpy. Weights and synthetic tokens come from a
counter-based generator (Philox) keyed by seed plus a fixed stream path, so
rebuilding a model or batch with the same seed is bit-identical no matter
what was generated before.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

VGGT_STYLE = "vggt"
PI3_STYLE = "pi3"

DEFAULT_NUM_BLOCKS = {VGGT_STYLE: 48, PI3_STYLE: 36}

# Stream namespaces for the splittable generator. Weights, special-token
# embeddings and synthetic data must never share a stream.
_NS_WEIGHTS = 0
_NS_SPECIALS = 1
_NS_DATA = 2

# Query rows processed per slab inside dense_mha, bounds the materialized
# logit matrix to chunk * M_k floats.
_ROW_CHUNK = 4096


def _philox(seed: int, *path: int) -> np.random.Generator:
    """Independent generator for (seed, path); splitting is collision-free."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))


def _uniform(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


# ---------------------------------------------------------------------------
# token batch
# ---------------------------------------------------------------------------


@dataclass
class TokenBatch:
    """A (B, N, L, C) token tensor plus the patch-grid metadata.

    Within each frame the token order is fixed: ``num_special`` special
    tokens first, then the n_h * n_w patch tokens in row-major order. All
    index math in this package assumes that layout.
    """

    data: np.ndarray
    n_h: int
    n_w: int
    num_special: int
    special_layout: str

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 4:
            raise ValueError(f"token data must be (B, N, L, C), got shape {self.data.shape}")
        expected = self.n_h * self.n_w + self.num_special
        if self.data.shape[2] != expected:
            raise ValueError(
                f"L={self.data.shape[2]} does not match n_h*n_w + num_special = {expected}"
            )
        if self.special_layout not in (VGGT_STYLE, PI3_STYLE):
            raise ValueError(f"unknown special_layout: {self.special_layout!r}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("token data contains NaN or Inf")

    @property
    def B(self) -> int:
        return self.data.shape[0]

    @property
    def N(self) -> int:
        return self.data.shape[1]

    @property
    def L(self) -> int:
        return self.data.shape[2]

    @property
    def C(self) -> int:
        return self.data.shape[3]

    @property
    def num_patches(self) -> int:
        return self.n_h * self.n_w

    def replace_data(self, data: np.ndarray) -> "TokenBatch":
        return TokenBatch(data, self.n_h, self.n_w, self.num_special, self.special_layout)

    def copy(self) -> "TokenBatch":
        return self.replace_data(self.data.copy())


def patch_row_indices(N: int, L: int, num_special: int) -> np.ndarray:
    """Global row indices of all patch tokens in the flattened (N*L) layout."""
    per_frame = np.arange(num_special, L, dtype=np.int64)
    return (np.arange(N, dtype=np.int64)[:, None] * L + per_frame[None, :]).reshape(-1)


# ---------------------------------------------------------------------------
# model config and weights
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    mode: str = VGGT_STYLE
    num_blocks: int | None = None
    embed_dim: int = 64
    num_heads: int = 4
    mlp_ratio: float = 4.0
    seed: int = 0
    num_special: int = 5
    # Frame attention at even block indices, global at odd. Flip to start global.
    frame_first: bool = True

    def __post_init__(self):
        if self.mode not in (VGGT_STYLE, PI3_STYLE):
            raise ValueError(f"mode must be {VGGT_STYLE!r} or {PI3_STYLE!r}, got {self.mode!r}")
        if self.num_blocks is None:
            object.__setattr__(self, "num_blocks", DEFAULT_NUM_BLOCKS[self.mode])
        if self.num_blocks < 2 or self.num_blocks % 2 != 0:
            raise ValueError(f"num_blocks must be even and >= 2, got {self.num_blocks}")
        if self.embed_dim < 1 or self.num_heads < 1:
            raise ValueError("embed_dim and num_heads must be positive")
        if self.embed_dim % self.num_heads != 0:
            raise ValueError("num_heads must divide embed_dim")
        if self.mlp_ratio <= 0:
            raise ValueError(f"mlp_ratio must be positive, got {self.mlp_ratio}")
        if self.num_special < 1:
            raise ValueError(f"num_special must be >= 1, got {self.num_special}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def hidden_dim(self) -> int:
        return int(round(self.mlp_ratio * self.embed_dim))

    @property
    def num_global(self) -> int:
        return self.num_blocks // 2

    def is_global_block(self, block_index: int) -> bool:
        if self.frame_first:
            return block_index % 2 == 1
        return block_index % 2 == 0


@dataclass
class BlockWeights:
    """One residual block: pre-norm attention plus pre-norm MLP, no attention biases."""

    attn_norm_scale: np.ndarray
    attn_norm_bias: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    mlp_norm_scale: np.ndarray
    mlp_norm_bias: np.ndarray
    mlp_w1: np.ndarray
    mlp_b1: np.ndarray
    mlp_w2: np.ndarray
    mlp_b2: np.ndarray


@dataclass
class Model:
    config: ModelConfig
    blocks: list[BlockWeights]
    # (variants, num_special, C): two variants for vggt (reference frame first),
    # one shared variant for pi3.
    special_tokens: np.ndarray = field(repr=False)

    def special_embedding(self, frame: int) -> np.ndarray:
        if self.config.mode == VGGT_STYLE:
            return self.special_tokens[0 if frame == 0 else 1]
        return self.special_tokens[0]


def special_token_embeddings(config: ModelConfig) -> np.ndarray:
    """Special-token stand-ins drawn from the model seed, shared with init_tokens."""
    C = config.embed_dim
    bound = 1.0 / np.sqrt(C)
    variants = 2 if config.mode == VGGT_STYLE else 1
    out = np.stack(
        [_uniform(_philox(config.seed, _NS_SPECIALS, v), (config.num_special, C), bound)
         for v in range(variants)]
    )
    return out


def make_model(config: ModelConfig) -> Model:
    """Build the toy alternating aggregator; same config gives bit-identical weights."""
    C = config.embed_dim
    hidden = config.hidden_dim
    blocks = []
    for i in range(config.num_blocks):
        def w(slot: int, shape, fan_in: int) -> np.ndarray:
            return _uniform(_philox(config.seed, _NS_WEIGHTS, i, slot), shape, 1.0 / np.sqrt(fan_in))

        blocks.append(
            BlockWeights(
                attn_norm_scale=np.ones(C, dtype=np.float32),
                attn_norm_bias=np.zeros(C, dtype=np.float32),
                wq=w(0, (C, C), C),
                wk=w(1, (C, C), C),
                wv=w(2, (C, C), C),
                wo=w(3, (C, C), C),
                mlp_norm_scale=np.ones(C, dtype=np.float32),
                mlp_norm_bias=np.zeros(C, dtype=np.float32),
                mlp_w1=w(4, (C, hidden), C),
                mlp_b1=np.zeros(hidden, dtype=np.float32),
                mlp_w2=w(5, (hidden, C), hidden),
                mlp_b2=np.zeros(C, dtype=np.float32),
            )
        )
    return Model(config=config, blocks=blocks, special_tokens=special_token_embeddings(config))


# ---------------------------------------------------------------------------
# embeddings and synthetic tokens
# ---------------------------------------------------------------------------


def sinusoidal_grid_embedding(n_h: int, n_w: int, C: int) -> np.ndarray:
    """2-D sinusoidal positional table, (n_h*n_w, C), row-major positions.

    First half of the channels encodes the row coordinate, second half the
    column; any remainder channels (C not divisible by 4) stay zero.
    """
    quarter = C // 4
    table = np.zeros((n_h * n_w, C), dtype=np.float64)
    if quarter > 0:
        freqs = 1.0 / (10000.0 ** (np.arange(quarter) / quarter))
        rows = np.repeat(np.arange(n_h), n_w)[:, None] * freqs[None, :]
        cols = np.tile(np.arange(n_w), n_h)[:, None] * freqs[None, :]
        table[:, 0:quarter] = np.sin(rows)
        table[:, quarter:2 * quarter] = np.cos(rows)
        table[:, 2 * quarter:3 * quarter] = np.sin(cols)
        table[:, 3 * quarter:4 * quarter] = np.cos(cols)
    return table.astype(np.float32)


def init_tokens(config: ModelConfig, B: int, N: int, n_h: int, n_w: int, seed: int) -> TokenBatch:
    """Synthetic token batch: seeded patch content + positional table + specials.

    Patch content is uniform in [-1, 1) from the data seed; the special-token
    rows come from the model seed so they match the model that will consume
    the batch. Frame 0 gets the reference-frame specials in vggt mode.
    """
    if min(B, N, n_h, n_w) < 1:
        raise ValueError("B, N, n_h, n_w must all be >= 1")
    C = config.embed_dim
    T = n_h * n_w
    content = _philox(seed, _NS_DATA, 0).uniform(-1.0, 1.0, size=(B, N, T, C)).astype(np.float32)
    patches = content + sinusoidal_grid_embedding(n_h, n_w, C)[None, None]

    specials = special_token_embeddings(config)
    data = np.empty((B, N, T + config.num_special, C), dtype=np.float32)
    for f in range(N):
        variant = specials[0] if (config.mode == PI3_STYLE or f == 0) else specials[1]
        data[:, f, : config.num_special] = variant
    data[:, :, config.num_special:] = patches
    return TokenBatch(data, n_h, n_w, config.num_special, config.mode)


# ---------------------------------------------------------------------------
# dense attention
# ---------------------------------------------------------------------------


def layer_norm(x: np.ndarray, scale: np.ndarray, bias: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * scale + bias


def dense_mha(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Single-head attention softmax(q k^T / sqrt(d)) v with max-subtraction.

    Shapes (M_q, d), (M_k, d), (M_k, d). Precision follows the widest input
    dtype, so passing float64 arrays gives the 64-bit oracle path.
    """
    q = np.asarray(q)
    k = np.asarray(k)
    v = np.asarray(v)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ValueError("q, k, v must be rank-2")
    if k.shape[0] == 0:
        raise ValueError("empty key set")
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ValueError(
            f"shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}"
        )
    d = q.shape[1]
    if d < 1:
        raise ValueError("head dim must be >= 1")
    dtype = np.result_type(q.dtype, k.dtype, v.dtype, np.float32)
    q = q.astype(dtype, copy=False)
    kt = k.astype(dtype, copy=False).T
    v = v.astype(dtype, copy=False)
    scale = dtype.type(1.0 / np.sqrt(d))

    out = np.empty((q.shape[0], v.shape[1]), dtype=dtype)
    for start in range(0, q.shape[0], _ROW_CHUNK):
        sl = slice(start, min(start + _ROW_CHUNK, q.shape[0]))
        logits = q[sl] @ kt
        logits *= scale
        logits -= logits.max(axis=1, keepdims=True)
        np.exp(logits, out=logits)
        denom = logits.sum(axis=1, keepdims=True)
        out[sl] = (logits @ v) / denom
    return out
