"""Three-view cascaded attention over a stack of consecutive slice features.

A (C, H, W, T) stack of T consecutive slice features is enhanced by three
windowed-attention passes, one per axis-aligned 2D view, in the fixed order
(W,T) -> (H,T) -> (H,W). Each pass transposes the stack so the view's two
axes form the attention plane and the remaining spatial axis is the parallel
batch axis. The cascade output at the center slice replaces the original
center-slice feature.

Views never share parameters; each pass owns its two attention blocks.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .attention import (
    AttentionConfig,
    PlaneBatch,
    SwinPairParams,
    init_swin_pair_params,
    swin_pair_pass,
)
from .errors import ContractError
from .params import ParameterStore
from .tensor import Tensor

__all__ = [
    "View",
    "VIEW_ORDER",
    "SliceStack",
    "VdFormerParams",
    "extract_slice_window",
    "stack_slices",
    "view_pass",
    "view_cascade",
    "vd_former",
    "init_vdformer_params",
]


class View(Enum):
    """Which two of (H, W, T) form the attention plane; the third is batch."""

    WT = "WT"
    HT = "HT"
    HW = "HW"


VIEW_ORDER = (View.WT, View.HT, View.HW)

# Forward permutation from (C, H, W, T) to (batch, plane_rows, plane_cols, C).
_VIEW_PERMUTE = {
    View.WT: (1, 2, 3, 0),  # B=H, rows=W, cols=T
    View.HT: (2, 1, 3, 0),  # B=W, rows=H, cols=T
    View.HW: (3, 1, 2, 0),  # B=T, rows=H, cols=W
}


def view_plane_dims(view: View, h: int, w: int, t: int) -> tuple[int, int]:
    """(rows, cols) of the attention plane for a (C,H,W,T) stack."""
    if view is View.WT:
        return (w, t)
    if view is View.HT:
        return (h, t)
    return (h, w)


@dataclass
class SliceStack:
    """T consecutive slice features centered on source slice `center`."""

    data: Tensor  # (C, H, W, T)
    center: int
    span: int

    def __post_init__(self):
        if self.span % 2 != 1 or self.span < 1:
            raise ContractError(f"slice span must be odd and positive, got {self.span}")
        if self.data.ndim != 4 or self.data.shape[3] != self.span:
            raise ContractError(
                f"stack shape {self.data.shape} inconsistent with span {self.span}"
            )


def stack_slices(features: Sequence[Tensor]) -> Tensor:
    """Stack (C,H,W) features along a new trailing axis -> (C,H,W,T)."""
    c, h, w = features[0].shape
    parts = [T.reshape(f, (c, h, w, 1)) for f in features]
    return T.concat(parts, axis=3)


def extract_slice_window(
    slice_features: Sequence[Optional[Tensor]], t: int, span: int
) -> SliceStack:
    """Assemble the window of `span` slice features centered on index t.

    Indices outside the sequence contribute all-zero features, as do explicit
    None entries (so callers can skip computing features they know are out of
    range).
    """
    if span % 2 != 1 or span < 1:
        raise ContractError(f"span must be odd and positive, got {span}")
    n = len(slice_features)
    if not 0 <= t < n:
        raise IndexError(f"slice index {t} out of range [0, {n})")
    ref = next(f for f in slice_features if f is not None)
    half = span // 2
    parts = []
    for k in range(t - half, t + half + 1):
        f = slice_features[k] if 0 <= k < n else None
        parts.append(f if f is not None else Tensor(np.zeros(ref.shape)))
    return SliceStack(data=stack_slices(parts), center=t, span=span)


@dataclass
class VdFormerParams:
    per_view: dict  # View -> SwinPairParams


def view_pass(
    x: Tensor,
    view: View,
    params: SwinPairParams,
    cfg: AttentionConfig,
    attn_sink: Optional[list] = None,
) -> Tensor:
    """One windowed-attention pass over a single 2D view of the stack."""
    if x.ndim != 4:
        raise ContractError(f"view_pass expects (C,H,W,T), got {x.shape}")
    perm = _VIEW_PERMUTE[view]
    inv = tuple(int(i) for i in np.argsort(perm))
    plane = PlaneBatch(T.permute(x, perm))
    out = swin_pair_pass(plane, params, cfg, attn_sink=attn_sink)
    return T.permute(out.tokens, inv)


def view_cascade(
    x: Tensor,
    params: VdFormerParams,
    cfg: AttentionConfig,
    attn_sink: Optional[list] = None,
) -> Tensor:
    """The full (W,T) -> (H,T) -> (H,W) cascade, shape-preserving."""
    for view in VIEW_ORDER:
        x = view_pass(x, view, params.per_view[view], cfg, attn_sink=attn_sink)
    return x


def vd_former(stack: SliceStack, params: VdFormerParams, cfg: AttentionConfig) -> Tensor:
    """Cascade the three views, then return the center slice: (C,H,W)."""
    out = view_cascade(stack.data, params, cfg)
    return T.slice_(out, (slice(None), slice(None), slice(None), stack.span // 2))


def init_vdformer_params(
    store: ParameterStore,
    prefix: str,
    cfg: AttentionConfig,
    h: int,
    w: int,
    t: int,
    rng: np.random.Generator,
) -> VdFormerParams:
    per_view = {}
    for view in VIEW_ORDER:
        dims = view_plane_dims(view, h, w, t)
        per_view[view] = init_swin_pair_params(
            store, f"{prefix}.view{view.value}", cfg, dims, rng
        )
    return VdFormerParams(per_view=per_view)
