"""Window-based multi-head self-attention over batched 2D token planes.

A plane batch is a (B, Lr, Lc, C) grid of tokens: B independent planes
attended in parallel. `swin_pair_pass` applies two pre-norm transformer
blocks: the first on the regular window tiling, the second after cyclically
shifting the plane by half a window on both axes, with an additive mask that
blocks token pairs whose content wrapped across the torus seam (so shifted
attention equals attention over the shifted window tiling of the original
plane, not toroidal attention).

Window geometry: an axis shorter than the window size is covered by a single
clamped window and is never shifted; otherwise the axis is zero-padded up to
a multiple of the window size and padded cells are masked from everything
except themselves.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .params import ParameterStore
from .tensor import Parameter, Tensor

MASK_VALUE = -1e9

__all__ = [
    "AttentionConfig",
    "PlaneBatch",
    "PadRecord",
    "WindowMask",
    "BlockParams",
    "SwinPairParams",
    "effective_window",
    "effective_shifts",
    "partition_windows",
    "merge_windows",
    "cyclic_shift",
    "build_shift_mask",
    "wmsa",
    "swin_pair_pass",
    "init_block_params",
    "init_swin_pair_params",
    "count_attention_pairs",
]


@dataclass(frozen=True)
class AttentionConfig:
    """Shape and capacity of one attention block family."""

    channels: int
    heads: int
    window: int
    use_relative_bias: bool = True
    mlp_ratio: float = 2.0

    def __post_init__(self):
        if self.channels < 1 or self.heads < 1:
            raise ConfigError("channels and heads must be positive")
        if self.channels % self.heads != 0:
            raise ConfigError(
                f"channels ({self.channels}) not divisible by heads ({self.heads})"
            )
        if self.window < 1:
            raise ConfigError(f"window must be >= 1, got {self.window}")
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive")

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads

    @property
    def mlp_hidden(self) -> int:
        return max(1, int(round(self.mlp_ratio * self.channels)))


@dataclass
class PlaneBatch:
    """B independent (Lr x Lc) token planes with C channels, channels last."""

    tokens: Tensor  # (B, Lr, Lc, C)

    def __post_init__(self):
        if self.tokens.ndim != 4:
            raise ContractError(f"PlaneBatch needs 4D tokens, got {self.tokens.shape}")

    @property
    def batch(self) -> int:
        return self.tokens.shape[0]

    @property
    def rows(self) -> int:
        return self.tokens.shape[1]

    @property
    def cols(self) -> int:
        return self.tokens.shape[2]

    @property
    def channels(self) -> int:
        return self.tokens.shape[3]


@dataclass(frozen=True)
class PadRecord:
    """Geometry needed to invert a window partition."""

    batch: int
    rows: int
    cols: int
    padded_rows: int
    padded_cols: int
    win_rows: int
    win_cols: int
    pad_mask: np.ndarray  # (padded_rows, padded_cols) bool, True where padded

    @property
    def grid_rows(self) -> int:
        return self.padded_rows // self.win_rows

    @property
    def grid_cols(self) -> int:
        return self.padded_cols // self.win_cols

    @property
    def windows_per_plane(self) -> int:
        return self.grid_rows * self.grid_cols

    @property
    def tokens_per_window(self) -> int:
        return self.win_rows * self.win_cols


@dataclass(frozen=True)
class WindowMask:
    """Additive logit mask, one (n x n) slab per window of a single plane."""

    values: np.ndarray  # (windows_per_plane, n, n) with entries in {0, MASK_VALUE}


def effective_window(length: int, w: int) -> int:
    """Window extent along one axis: clamped to the axis length."""
    return min(w, length)


def effective_shifts(rows: int, cols: int, w: int, shift: int) -> tuple[int, int]:
    """Per-axis shift: zero on any axis covered by a single window."""
    wr, wc = effective_window(rows, w), effective_window(cols, w)
    sr = shift if math.ceil(rows / wr) > 1 else 0
    sc = shift if math.ceil(cols / wc) > 1 else 0
    return sr, sc


def partition_windows(
    plane: PlaneBatch, w: int, pad_value: float = 0.0
) -> tuple[Tensor, PadRecord]:
    """Tile each plane into non-overlapping windows, padding as needed.

    Returns tokens of shape (B * grid_rows * grid_cols, win_rows * win_cols, C)
    with windows ordered plane-major, then row-major over the window grid.
    """
    if w < 1:
        raise ConfigError(f"window must be >= 1, got {w}")
    b, lr, lc, c = plane.tokens.shape
    wr, wc = effective_window(lr, w), effective_window(lc, w)
    nr, nc = math.ceil(lr / wr), math.ceil(lc / wc)
    pr, pc = nr * wr, nc * wc
    x = plane.tokens
    if (pr, pc) != (lr, lc):
        x = T.pad(x, ((0, 0), (0, pr - lr), (0, pc - lc), (0, 0)), value=pad_value)
    pad_mask = np.ones((pr, pc), dtype=bool)
    pad_mask[:lr, :lc] = False
    x = T.reshape(x, (b, nr, wr, nc, wc, c))
    x = T.permute(x, (0, 1, 3, 2, 4, 5))
    windows = T.reshape(x, (b * nr * nc, wr * wc, c))
    rec = PadRecord(b, lr, lc, pr, pc, wr, wc, pad_mask)
    return windows, rec


def merge_windows(windows: Tensor, rec: PadRecord) -> PlaneBatch:
    """Exact inverse of partition_windows; padded cells are discarded."""
    b, nr, nc = rec.batch, rec.grid_rows, rec.grid_cols
    wr, wc = rec.win_rows, rec.win_cols
    expected = (b * nr * nc, wr * wc, windows.shape[-1])
    if windows.shape != expected:
        raise ContractError(
            f"windows shape {windows.shape} inconsistent with pad record {expected}"
        )
    x = T.reshape(windows, (b, nr, nc, wr, wc, windows.shape[-1]))
    x = T.permute(x, (0, 1, 3, 2, 4, 5))
    x = T.reshape(x, (b, rec.padded_rows, rec.padded_cols, windows.shape[-1]))
    if (rec.padded_rows, rec.padded_cols) != (rec.rows, rec.cols):
        x = T.slice_(x, (slice(None), slice(0, rec.rows), slice(0, rec.cols)))
    return PlaneBatch(x)


def _roll_axis(t: Tensor, shift: int, axis: int) -> Tensor:
    """np.roll semantics composed from two slices and a concat."""
    n = t.shape[axis]
    s = shift % n
    if s == 0:
        return t
    head = [slice(None)] * t.ndim
    tail = [slice(None)] * t.ndim
    head[axis] = slice(n - s, n)
    tail[axis] = slice(0, n - s)
    return T.concat([T.slice_(t, tuple(head)), T.slice_(t, tuple(tail))], axis=axis)


def cyclic_shift(plane: PlaneBatch, offset_rows: int, offset_cols: int) -> PlaneBatch:
    """Torus roll of the token grid (offsets taken modulo the extents)."""
    x = _roll_axis(plane.tokens, offset_rows, axis=1)
    x = _roll_axis(x, offset_cols, axis=2)
    return PlaneBatch(x)


def build_shift_mask(
    rows: int, cols: int, w: int, shift: int, rec: PadRecord
) -> WindowMask:
    """Additive mask for windows of a plane rolled by the effective shifts.

    After rolling by -s, the last s positions along an axis hold content that
    wrapped across the torus seam; pairs with differing wrap flags on either
    axis are blocked. Padded cells (appended after the roll) are blocked from
    everything except themselves. The diagonal is always open.
    """
    if not 0 <= shift < w:
        raise ConfigError(f"shift must satisfy 0 <= shift < window, got {shift}")
    sr, sc = effective_shifts(rows, cols, w, shift)
    pr, pc = rec.padded_rows, rec.padded_cols

    flag_r = np.zeros(pr, dtype=np.int64)
    if sr:
        flag_r[rows - sr : rows] = 1
    flag_c = np.zeros(pc, dtype=np.int64)
    if sc:
        flag_c[cols - sc : cols] = 1
    region = flag_r[:, None] * 2 + flag_c[None, :]

    def tile(plane_arr):
        v = plane_arr.reshape(rec.grid_rows, rec.win_rows, rec.grid_cols, rec.win_cols)
        return v.transpose(0, 2, 1, 3).reshape(rec.windows_per_plane, rec.tokens_per_window)

    rid = tile(region)
    padded = tile(rec.pad_mask)
    same_region = rid[:, :, None] == rid[:, None, :]
    no_pad = ~(padded[:, :, None] | padded[:, None, :])
    allowed = same_region & no_pad
    n = rec.tokens_per_window
    allowed[:, np.arange(n), np.arange(n)] = True
    values = np.where(allowed, 0.0, MASK_VALUE)
    return WindowMask(values)


# --------------------------------------------------------------------------
# Attention pair instrumentation (feeds the cost model's equality check)
# --------------------------------------------------------------------------

class PairCounter:
    """Counts query-key token pairs whose logits were actually computed."""

    def __init__(self):
        self.pairs = 0


_ACTIVE_COUNTERS: list[PairCounter] = []


@contextmanager
def count_attention_pairs():
    counter = PairCounter()
    _ACTIVE_COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _ACTIVE_COUNTERS.remove(counter)


# --------------------------------------------------------------------------
# W-MSA block
# --------------------------------------------------------------------------

@dataclass
class BlockParams:
    """Parameters of one pre-norm transformer block (attention + MLP)."""

    norm1_gamma: Parameter
    norm1_beta: Parameter
    qkv_weight: Parameter
    qkv_bias: Parameter
    proj_weight: Parameter
    proj_bias: Parameter
    rel_bias_table: Optional[Parameter]
    norm2_gamma: Parameter
    norm2_beta: Parameter
    fc1_weight: Parameter
    fc1_bias: Parameter
    fc2_weight: Parameter
    fc2_bias: Parameter


@dataclass
class SwinPairParams:
    blocks: tuple[BlockParams, BlockParams]


_ONEHOT_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _relative_onehot(wr: int, wc: int) -> np.ndarray:
    """(n^2, (2wr-1)(2wc-1)) one-hot rows mapping token pairs to offsets."""
    key = (wr, wc)
    cached = _ONEHOT_CACHE.get(key)
    if cached is not None:
        return cached
    rr, cc = np.meshgrid(np.arange(wr), np.arange(wc), indexing="ij")
    r = rr.reshape(-1)
    c = cc.reshape(-1)
    dr = r[:, None] - r[None, :] + (wr - 1)
    dc = c[:, None] - c[None, :] + (wc - 1)
    idx = (dr * (2 * wc - 1) + dc).reshape(-1)
    table_size = (2 * wr - 1) * (2 * wc - 1)
    onehot = np.zeros((idx.size, table_size), dtype=np.float64)
    onehot[np.arange(idx.size), idx] = 1.0
    _ONEHOT_CACHE[key] = onehot
    return onehot


def wmsa(
    windows: Tensor,
    params: BlockParams,
    mask: Optional[WindowMask],
    cfg: AttentionConfig,
    window_dims: Optional[tuple[int, int]] = None,
    attn_sink: Optional[list] = None,
) -> Tensor:
    """Multi-head scaled dot-product attention within each window.

    windows: (Nw, n, C). The additive mask (one slab per window of a single
    plane) is tiled across the plane batch. `attn_sink`, when given, receives
    the post-softmax attention weights as a raw (Nw, heads, n, n) array.
    """
    nw, n, c = windows.shape
    if c != cfg.channels:
        raise ContractError(f"window channels {c} != config channels {cfg.channels}")
    nh, hd = cfg.heads, cfg.head_dim
    if window_dims is None:
        wr = wc = int(round(math.sqrt(n)))
        if wr * wc != n:
            raise ContractError("non-square windows need explicit window_dims")
    else:
        wr, wc = window_dims
        if wr * wc != n:
            raise ContractError(f"window_dims {window_dims} do not tile {n} tokens")

    for counter in _ACTIVE_COUNTERS:
        counter.pairs += nw * n * n

    qkv = T.matmul(T.reshape(windows, (nw * n, c)), params.qkv_weight) + params.qkv_bias
    qkv = T.reshape(qkv, (nw, n, 3, nh, hd))
    qkv = T.permute(qkv, (2, 0, 3, 1, 4))
    q = T.slice_(qkv, (0,))
    k = T.slice_(qkv, (1,))
    v = T.slice_(qkv, (2,))

    logits = T.matmul(q, T.permute(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(hd))
    if cfg.use_relative_bias:
        if params.rel_bias_table is None:
            raise ContractError("config requests relative bias but params have none")
        onehot = _relative_onehot(wr, wc)
        if params.rel_bias_table.shape != (onehot.shape[1], nh):
            raise ContractError(
                f"relative bias table shape {params.rel_bias_table.shape} does not "
                f"match window {wr}x{wc} with {nh} heads"
            )
        bias = T.matmul(Tensor(onehot), params.rel_bias_table)  # (n*n, nh)
        bias = T.permute(T.reshape(bias, (n, n, nh)), (2, 0, 1))
        logits = logits + T.reshape(bias, (1, nh, n, n))
    if mask is not None:
        per_plane = mask.values.shape[0]
        if per_plane == 0 or nw % per_plane != 0 or mask.values.shape[1:] != (n, n):
            raise ContractError(
                f"mask of {mask.values.shape} cannot cover {nw} windows of {n} tokens"
            )
        tiled = np.tile(mask.values, (nw // per_plane, 1, 1)).reshape(nw, 1, n, n)
        logits = logits + Tensor(tiled)

    attn = T.softmax_last(logits)
    if attn_sink is not None:
        attn_sink.append(attn.data.copy())

    out = T.matmul(attn, v)  # (Nw, nh, n, hd)
    out = T.reshape(T.permute(out, (0, 2, 1, 3)), (nw * n, c))
    out = T.matmul(out, params.proj_weight) + params.proj_bias
    return T.reshape(out, (nw, n, c))


def _mlp(x: Tensor, params: BlockParams) -> Tensor:
    shape = x.shape
    h = T.reshape(x, (-1, shape[-1]))
    h = T.matmul(h, params.fc1_weight) + params.fc1_bias
    h = T.gelu(h)
    h = T.matmul(h, params.fc2_weight) + params.fc2_bias
    return T.reshape(h, shape)


def _block(
    plane: PlaneBatch,
    params: BlockParams,
    cfg: AttentionConfig,
    shifted: bool,
    attn_sink: Optional[list],
) -> PlaneBatch:
    rows, cols = plane.rows, plane.cols
    shift = cfg.window // 2 if shifted else 0
    sr, sc = effective_shifts(rows, cols, cfg.window, shift) if shift else (0, 0)

    x = plane.tokens
    h = T.layer_norm(x, params.norm1_gamma, params.norm1_beta)
    hp = PlaneBatch(h)
    if sr or sc:
        hp = cyclic_shift(hp, -sr, -sc)
    windows, rec = partition_windows(hp, cfg.window)
    if shift == 0 and not rec.pad_mask.any():
        mask = None
    else:
        mask = build_shift_mask(rows, cols, cfg.window, shift, rec)
    a = wmsa(windows, params, mask, cfg,
             window_dims=(rec.win_rows, rec.win_cols), attn_sink=attn_sink)
    merged = merge_windows(a, rec)
    if sr or sc:
        merged = cyclic_shift(merged, sr, sc)
    x = x + merged.tokens

    h2 = T.layer_norm(x, params.norm2_gamma, params.norm2_beta)
    x = x + _mlp(h2, params)
    return PlaneBatch(x)


def swin_pair_pass(
    plane: PlaneBatch,
    params: SwinPairParams,
    cfg: AttentionConfig,
    attn_sink: Optional[list] = None,
) -> PlaneBatch:
    """Regular-window block followed by a shifted-window block."""
    out = _block(plane, params.blocks[0], cfg, shifted=False, attn_sink=attn_sink)
    out = _block(out, params.blocks[1], cfg, shifted=True, attn_sink=attn_sink)
    return out


# --------------------------------------------------------------------------
# Parameter construction
# --------------------------------------------------------------------------

def init_block_params(
    store: ParameterStore,
    prefix: str,
    cfg: AttentionConfig,
    plane_dims: tuple[int, int],
    rng: np.random.Generator,
) -> BlockParams:
    """Create one block's parameters.

    The relative-bias table is sized by the effective (clamped) window for
    the plane the block will run on, so every table entry corresponds to an
    offset that actually occurs.
    """
    c = cfg.channels
    hidden = cfg.mlp_hidden
    wr = effective_window(plane_dims[0], cfg.window)
    wc = effective_window(plane_dims[1], cfg.window)

    def normal(shape, std=0.02):
        return rng.normal(0.0, std, size=shape)

    rel = None
    if cfg.use_relative_bias:
        rel = store.register(
            f"{prefix}.rel_bias.table",
            normal(((2 * wr - 1) * (2 * wc - 1), cfg.heads)),
        )
    return BlockParams(
        norm1_gamma=store.register(f"{prefix}.norm1.gamma", np.ones(c)),
        norm1_beta=store.register(f"{prefix}.norm1.beta", np.zeros(c)),
        qkv_weight=store.register(f"{prefix}.qkv.weight", normal((c, 3 * c))),
        qkv_bias=store.register(f"{prefix}.qkv.bias", np.zeros(3 * c)),
        proj_weight=store.register(f"{prefix}.proj.weight", normal((c, c))),
        proj_bias=store.register(f"{prefix}.proj.bias", np.zeros(c)),
        rel_bias_table=rel,
        norm2_gamma=store.register(f"{prefix}.norm2.gamma", np.ones(c)),
        norm2_beta=store.register(f"{prefix}.norm2.beta", np.zeros(c)),
        fc1_weight=store.register(f"{prefix}.mlp.fc1.weight", normal((c, hidden))),
        fc1_bias=store.register(f"{prefix}.mlp.fc1.bias", np.zeros(hidden)),
        fc2_weight=store.register(f"{prefix}.mlp.fc2.weight", normal((hidden, c))),
        fc2_bias=store.register(f"{prefix}.mlp.fc2.bias", np.zeros(c)),
    )


def init_swin_pair_params(
    store: ParameterStore,
    prefix: str,
    cfg: AttentionConfig,
    plane_dims: tuple[int, int],
    rng: np.random.Generator,
) -> SwinPairParams:
    b0 = init_block_params(store, f"{prefix}.block0", cfg, plane_dims, rng)
    b1 = init_block_params(store, f"{prefix}.block1", cfg, plane_dims, rng)
    return SwinPairParams(blocks=(b0, b1))
