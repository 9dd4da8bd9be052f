"""Single-stage anchor-free lesion detector over fused pyramid features.

Each pyramid level is optionally fused with its slice neighbors (no fusion,
pseudo-3D conv, full 3D conv, or the three-view attention cascade), then a
shared convolutional head predicts per-position objectness logits and
exp-positive (l, t, r, b) distances in level-stride units. Targets assign a
position to a box when the cell center lies inside it and the box's longer
side falls in the level's size band; overlaps resolve to the smaller box.

Losses: binary cross-entropy averaged over every position of every level,
plus smooth-L1 (beta 1) averaged over the regression components of positive
positions. Decoding thresholds sigmoid scores and applies greedy NMS that
suppresses overlap strictly above the IoU threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .attention import AttentionConfig
from .backbone import PYRAMID_CHANNELS, PYRAMID_LEVELS
from .errors import ConfigError, ContractError, ValidationError
from .metrics import LesionBox, iou
from .params import ParameterStore
from .tensor import Parameter, Tensor
from .viewfusion import VdFormerParams, init_vdformer_params, stack_slices, vd_former
from .viewfusion import SliceStack

__all__ = [
    "FusionMode",
    "DetectionTargets",
    "LesionBox",
    "LEVEL_SIZE_BOUNDS",
    "fuse_level",
    "head_forward",
    "assign_targets",
    "detection_loss",
    "decode_and_nms",
    "init_fusion_params",
    "init_head_params",
    "HeadParams",
]


class FusionMode(Enum):
    NONE = "none"
    P3D = "p3d"
    C3D = "c3d"
    VDFORMER = "vdformer"


# Partition of box longer-side (pixels) across pyramid levels: level 2 takes
# everything below 16, level 6 everything from 128 up.
LEVEL_SIZE_BOUNDS = (16.0, 32.0, 64.0, 128.0)


def level_for_box(box: LesionBox) -> int:
    side = box.longer_side
    for i, bound in enumerate(LEVEL_SIZE_BOUNDS):
        if side < bound:
            return PYRAMID_LEVELS[i]
    return PYRAMID_LEVELS[-1]


# ---------------------------------------------------------------------------
# Inter-slice fusion
# ---------------------------------------------------------------------------

@dataclass
class C3dParams:
    weights: list  # T kernels, each (C, C, 3, 3); one tap per slice offset
    bias: Parameter


@dataclass
class P3dParams:
    spatial_weight: Parameter  # (C, C, 3, 3), shared across slices
    spatial_bias: Parameter
    temporal_weights: list  # T matrices (C, C), one per slice offset
    temporal_bias: Parameter


@dataclass
class FusionParams:
    mode: FusionMode
    vd: Optional[VdFormerParams] = None
    vd_cfg: Optional[AttentionConfig] = None
    c3d: Optional[C3dParams] = None
    p3d: Optional[P3dParams] = None


def fuse_level(features: Sequence[Tensor], params: FusionParams) -> Tensor:
    """Fuse T consecutive per-level feature maps into the center one."""
    t = len(features)
    if t % 2 != 1:
        raise ContractError(f"fusion window must be odd, got {t}")
    center = t // 2
    mode = params.mode
    if mode is FusionMode.NONE:
        return features[center]
    if mode is FusionMode.VDFORMER:
        if params.vd is None or params.vd_cfg is None:
            raise ConfigError("vdformer fusion selected but parameters missing")
        stack = SliceStack(data=stack_slices(features), center=center, span=t)
        return vd_former(stack, params.vd, params.vd_cfg)
    if mode is FusionMode.C3D:
        if params.c3d is None or len(params.c3d.weights) != t:
            raise ConfigError("c3d fusion parameters missing or wrong depth")
        acc = None
        for k in range(t):
            zero_bias = Tensor(np.zeros(params.c3d.bias.shape))
            term = T.conv2d(features[k], params.c3d.weights[k], zero_bias,
                            stride=1, padding=1)
            acc = term if acc is None else acc + term
        c = acc.shape[0]
        acc = acc + T.reshape(params.c3d.bias, (c, 1, 1))
        return T.gelu(acc)
    if mode is FusionMode.P3D:
        if params.p3d is None or len(params.p3d.temporal_weights) != t:
            raise ConfigError("p3d fusion parameters missing or wrong depth")
        c, h, w = features[center].shape
        acc = None
        for k in range(t):
            y = T.conv2d(features[k], params.p3d.spatial_weight,
                         params.p3d.spatial_bias, stride=1, padding=1)
            flat = T.reshape(T.permute(y, (1, 2, 0)), (h * w, c))
            term = T.matmul(flat, params.p3d.temporal_weights[k])
            acc = term if acc is None else acc + term
        acc = acc + params.p3d.temporal_bias
        out = T.permute(T.reshape(acc, (h, w, c)), (2, 0, 1))
        return T.gelu(out)
    raise ConfigError(f"unknown fusion mode {mode}")


def init_fusion_params(
    store: ParameterStore,
    mode: FusionMode,
    level: int,
    level_hw: tuple[int, int],
    span: int,
    vd_cfg: Optional[AttentionConfig],
    rng: np.random.Generator,
) -> FusionParams:
    c = PYRAMID_CHANNELS
    if mode is FusionMode.NONE:
        return FusionParams(mode=mode)
    if mode is FusionMode.VDFORMER:
        vd = init_vdformer_params(
            store, f"vdformer.level{level}", vd_cfg, level_hw[0], level_hw[1], span, rng
        )
        return FusionParams(mode=mode, vd=vd, vd_cfg=vd_cfg)
    if mode is FusionMode.C3D:
        std = math.sqrt(2.0 / (c * 9 * span))
        weights = [
            store.register(f"c3d.level{level}.tap{k}.weight",
                           rng.normal(0.0, std, size=(c, c, 3, 3)))
            for k in range(span)
        ]
        bias = store.register(f"c3d.level{level}.bias", np.zeros(c))
        return FusionParams(mode=mode, c3d=C3dParams(weights=weights, bias=bias))
    if mode is FusionMode.P3D:
        std2d = math.sqrt(2.0 / (c * 9))
        std1d = math.sqrt(2.0 / (c * span))
        spatial_w = store.register(f"p3d.level{level}.spatial.weight",
                                   rng.normal(0.0, std2d, size=(c, c, 3, 3)))
        spatial_b = store.register(f"p3d.level{level}.spatial.bias", np.zeros(c))
        temporal = [
            store.register(f"p3d.level{level}.temporal.tap{k}.weight",
                           rng.normal(0.0, std1d, size=(c, c)))
            for k in range(span)
        ]
        temporal_b = store.register(f"p3d.level{level}.temporal.bias", np.zeros(c))
        return FusionParams(mode=mode, p3d=P3dParams(
            spatial_weight=spatial_w, spatial_bias=spatial_b,
            temporal_weights=temporal, temporal_bias=temporal_b))
    raise ConfigError(f"unknown fusion mode {mode}")


# ---------------------------------------------------------------------------
# Head
# ---------------------------------------------------------------------------

@dataclass
class HeadParams:
    tower: list  # [(weight, bias), (weight, bias)] 3x3 convs
    cls_weight: Parameter
    cls_bias: Parameter
    reg_weight: Parameter
    reg_bias: Parameter


def init_head_params(store: ParameterStore, rng: np.random.Generator) -> HeadParams:
    c = PYRAMID_CHANNELS
    std = math.sqrt(2.0 / (c * 9))
    tower = []
    for k in range(2):
        w = store.register(f"head.tower{k}.weight", rng.normal(0.0, std, size=(c, c, 3, 3)))
        b = store.register(f"head.tower{k}.bias", np.zeros(c))
        tower.append((w, b))
    cls_w = store.register("head.cls.weight", rng.normal(0.0, 0.01, size=(1, c, 1, 1)))
    # background-prior bias keeps early training from flooding positives
    cls_b = store.register("head.cls.bias", np.full(1, -2.0))
    reg_w = store.register("head.reg.weight", rng.normal(0.0, 0.01, size=(4, c, 1, 1)))
    reg_b = store.register("head.reg.bias", np.zeros(4))
    return HeadParams(tower=tower, cls_weight=cls_w, cls_bias=cls_b,
                      reg_weight=reg_w, reg_bias=reg_b)


def head_forward(pyramid: dict, params: HeadParams) -> dict:
    """{level: feature} -> {level: (cls logits (1,H,W), distances (4,H,W))}.

    Regression outputs pass through exp, so decoded extents are positive.
    """
    out = {}
    for level in PYRAMID_LEVELS:
        if level not in pyramid:
            raise ContractError(f"pyramid level {level} missing")
        x = pyramid[level]
        for w, b in params.tower:
            x = T.gelu(T.conv2d(x, w, b, stride=1, padding=1))
        cls = T.conv2d(x, params.cls_weight, params.cls_bias, stride=1)
        reg = T.exp(T.conv2d(x, params.reg_weight, params.reg_bias, stride=1))
        out[level] = (cls, reg)
    return out


# ---------------------------------------------------------------------------
# Target assignment
# ---------------------------------------------------------------------------

@dataclass
class DetectionTargets:
    labels: dict  # level -> (H_i, W_i) float array of {0, 1}
    regression: dict  # level -> (4, H_i, W_i); valid only where label == 1


def _level_grid(level: int, image_hw: tuple[int, int]) -> tuple[int, int, int]:
    stride = 2 ** level
    return image_hw[0] // stride, image_hw[1] // stride, stride


def assign_targets(gt: Sequence[LesionBox], image_hw: tuple[int, int]) -> DetectionTargets:
    """Per-position labels and (l,t,r,b) regression targets in stride units."""
    for b in gt:
        if b.area <= 0:
            raise ValidationError(f"degenerate ground-truth box {b}")
    labels = {}
    regression = {}
    by_level: dict = {lvl: [] for lvl in PYRAMID_LEVELS}
    for idx, b in enumerate(gt):
        by_level[level_for_box(b)].append((idx, b))
    for level in PYRAMID_LEVELS:
        h, w, stride = _level_grid(level, image_hw)
        lab = np.zeros((h, w))
        reg = np.zeros((4, h, w))
        boxes = by_level[level]
        if boxes:
            cy = (np.arange(h) + 0.5) * stride
            cx = (np.arange(w) + 0.5) * stride
            # overlaps resolve by smallest area, then lowest box index; the
            # winner must be written last, hence largest-first ordering with
            # descending index among equal areas
            order = sorted(boxes, key=lambda ib: (-ib[1].area, -ib[0]))
            for _idx, b in order:
                inside_y = (cy >= b.y1) & (cy <= b.y2)
                inside_x = (cx >= b.x1) & (cx <= b.x2)
                region = np.outer(inside_y, inside_x)
                if not region.any():
                    continue
                lab[region] = 1.0
                ys, xs = np.nonzero(region)
                reg[0, ys, xs] = (cx[xs] - b.x1) / stride
                reg[1, ys, xs] = (cy[ys] - b.y1) / stride
                reg[2, ys, xs] = (b.x2 - cx[xs]) / stride
                reg[3, ys, xs] = (b.y2 - cy[ys]) / stride
        labels[level] = lab
        regression[level] = reg
    return DetectionTargets(labels=labels, regression=regression)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def detection_loss(preds: dict, targets: DetectionTargets):
    """(total, classification, regression) scalar tensors."""
    cls_parts = []
    lab_parts = []
    reg_terms = []
    n_pos_components = 0
    for level in PYRAMID_LEVELS:
        cls, reg = preds[level]
        lab = targets.labels[level]
        cls_parts.append(T.reshape(cls, (-1,)))
        lab_parts.append(lab.reshape(-1))
        mask = lab > 0
        n_pos = int(mask.sum())
        if n_pos:
            n_pos_components += 4 * n_pos
            mask4 = np.broadcast_to(mask, reg.shape)
            per_elem = T.smooth_l1(reg, Tensor(targets.regression[level]), beta=1.0)
            reg_terms.append(T.sum_all(T.mul(per_elem, Tensor(mask4.astype(float)))))
    cls_loss = T.bce_with_logits_mean(
        T.concat(cls_parts, axis=0), Tensor(np.concatenate(lab_parts))
    )
    if reg_terms:
        total_reg = reg_terms[0]
        for term in reg_terms[1:]:
            total_reg = total_reg + term
        reg_loss = total_reg * (1.0 / n_pos_components)
    else:
        reg_loss = Tensor(0.0)
    return cls_loss + reg_loss, cls_loss, reg_loss


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------

def decode_and_nms(
    preds: dict,
    image_hw: tuple[int, int],
    slice_index: int,
    score_threshold: float = 0.05,
    iou_threshold: float = 0.5,
) -> list[LesionBox]:
    """Threshold, decode to pixel boxes, greedy NMS (suppress IoU > thr).

    Candidate order is (descending score, lower level, row-major position),
    which fixes all tie-breaks.
    """
    h_img, w_img = image_hw
    candidates = []
    for level in PYRAMID_LEVELS:
        cls, reg = preds[level]
        h, w, stride = _level_grid(level, image_hw)
        scores = 1.0 / (1.0 + np.exp(-cls.data[0]))
        keep = scores >= score_threshold
        if not keep.any():
            continue
        ys, xs = np.nonzero(keep)
        cy = (ys + 0.5) * stride
        cx = (xs + 0.5) * stride
        dist = reg.data[:, ys, xs] * stride
        x1 = np.maximum(cx - dist[0], 0.0)
        y1 = np.maximum(cy - dist[1], 0.0)
        x2 = np.minimum(cx + dist[2], float(w_img))
        y2 = np.minimum(cy + dist[3], float(h_img))
        for i in range(ys.size):
            candidates.append((
                -scores[ys[i], xs[i]], level, int(ys[i] * w + xs[i]),
                LesionBox(slice_index, float(x1[i]), float(y1[i]),
                          float(x2[i]), float(y2[i]), float(scores[ys[i], xs[i]])),
            ))
    candidates.sort(key=lambda c: (c[0], c[1], c[2]))
    kept: list[LesionBox] = []
    for _neg, _lvl, _pos, box in candidates:
        if all(iou(box, other) <= iou_threshold for other in kept):
            kept.append(box)
    return kept
