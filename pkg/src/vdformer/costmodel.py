"""Analytic accounting of attention cost: query-key pair counts, FLOPs, and
peak activation bytes for full 3D attention versus the three-view cascade.

Pair count is the number of query-key token pairs whose logit gets computed
(heads collapsed). For the cascade it sums, over three views and two window
passes each, windows-per-plane x (clamped window token count)^2 x parallel
planes, with zero padding counted as real tokens. Full 3D attention scores
every token pair once: (H*W*T)^2.

The byte model counts activations only: input/output feature maps, the
largest simultaneously-live attention-weight tensor, and QKV projections
(idealized to the unpadded token count). It reproduces the qualitative
feasibility ordering, not any absolute memory figure.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass

from .errors import ConfigError

__all__ = [
    "CostMode",
    "CostReport",
    "pair_count",
    "attention_flops",
    "activation_bytes",
    "cost_report",
    "sweep",
    "reports_to_csv",
    "reports_to_json",
]

FULL3D = "full3d"
VD = "vd"
_MODES = (FULL3D, VD)


def _axis_geometry(length: int, w: int) -> tuple[int, int]:
    """(clamped window extent, number of windows) along one axis."""
    we = min(w, length)
    return we, math.ceil(length / we)


def _vd_view_terms(h: int, w_dim: int, t: int, w: int):
    """Per view: (parallel planes, windows per plane, tokens per window)."""
    views = ((h, w_dim, t), (w_dim, h, t), (t, h, w_dim))  # (B, rows, cols)
    for batch, rows, cols in views:
        wr, nr = _axis_geometry(rows, w)
        wc, nc = _axis_geometry(cols, w)
        yield batch, nr * nc, wr * wc


def pair_count(mode: str, h: int, w_dim: int, t: int, w: int) -> int:
    """Query-key token pairs computed for one pass over a (H,W,T) grid."""
    if min(h, w_dim, t) < 1 or w < 1:
        raise ConfigError("dimensions and window must be positive")
    if mode == FULL3D:
        n = h * w_dim * t
        return n * n
    if mode == VD:
        total = 0
        for batch, windows, tokens in _vd_view_terms(h, w_dim, t, w):
            total += 2 * batch * windows * tokens * tokens  # two passes per view
        return total
    raise ConfigError(f"unknown cost mode {mode!r}")


def attention_flops(mode: str, c: int, h: int, w_dim: int, t: int, w: int) -> int:
    """Multiply-add FLOPs: logits and aggregation cost 2C per pair per side,
    plus QKV (6C^2 per token) and output (2C^2 per token) projections per
    attention application."""
    pairs = pair_count(mode, h, w_dim, t, w)
    tokens = h * w_dim * t
    applications = 1 if mode == FULL3D else 6  # 3 views x 2 passes
    projections = applications * tokens * (6 * c * c + 2 * c * c)
    return pairs * 4 * c + projections


def activation_bytes(
    mode: str, c: int, h: int, w_dim: int, t: int, w: int,
    bytes_per_scalar: int = 4,
) -> int:
    """Peak live activation bytes for one attention application.

    features (in + out) + largest live attention-weight tensor + QKV rows.
    Only one pass is live at a time in the cascade, so its weight term is the
    maximum over views.
    """
    if bytes_per_scalar < 1:
        raise ConfigError("bytes_per_scalar must be positive")
    tokens = h * w_dim * t
    features = 2 * c * tokens
    qkv = 3 * c * tokens
    if mode == FULL3D:
        weights = tokens * tokens
    elif mode == VD:
        weights = max(
            batch * windows * wt * wt
            for batch, windows, wt in _vd_view_terms(h, w_dim, t, w)
        )
    else:
        raise ConfigError(f"unknown cost mode {mode!r}")
    return bytes_per_scalar * (features + weights + qkv)


@dataclass(frozen=True)
class CostReport:
    mode: str
    channels: int
    height: int
    width: int
    depth: int
    window: int
    pairs: int
    flops: int
    activation_bytes: int


def cost_report(mode: str, c: int, h: int, w_dim: int, t: int, w: int,
                bytes_per_scalar: int = 4) -> CostReport:
    return CostReport(
        mode=mode, channels=c, height=h, width=w_dim, depth=t, window=w,
        pairs=pair_count(mode, h, w_dim, t, w),
        flops=attention_flops(mode, c, h, w_dim, t, w),
        activation_bytes=activation_bytes(mode, c, h, w_dim, t, w, bytes_per_scalar),
    )


def sweep(shapes, window_sizes, channels: int = 256,
          bytes_per_scalar: int = 4) -> list[CostReport]:
    """One report per mode x shape x window."""
    out = []
    for h, w_dim, t in shapes:
        for w in window_sizes:
            for mode in _MODES:
                out.append(cost_report(mode, channels, h, w_dim, t, w,
                                       bytes_per_scalar))
    return out


_FIELDS = ["mode", "channels", "height", "width", "depth", "window",
           "pairs", "flops", "activation_bytes"]


def reports_to_csv(reports: list[CostReport]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerow(asdict(r))
    return buf.getvalue()


def reports_to_json(reports: list[CostReport]) -> str:
    return json.dumps([asdict(r) for r in reports], indent=2, sort_keys=True) + "\n"
