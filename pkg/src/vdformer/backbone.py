"""Per-slice 2D feature extractor: patch embedding, four windowed-attention
stages with 2x2 patch merging between them, and top-down pyramid fusion to
five 256-channel levels.

Stage s (1-based) runs at resolution (H/p)/2^(s-1) and emits the feature map
named C_{s+1}; the pyramid levels P_2..P_5 fuse those maps top-down and P_6
max-pools P_5. Level i has stride 2^i relative to the input image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import (
    AttentionConfig,
    PlaneBatch,
    SwinPairParams,
    init_swin_pair_params,
    swin_pair_pass,
)
from .errors import ConfigError, ContractError
from .params import ParameterStore
from .tensor import Parameter, Tensor

PYRAMID_LEVELS = (2, 3, 4, 5, 6)
PYRAMID_CHANNELS = 256

__all__ = [
    "PYRAMID_LEVELS",
    "PYRAMID_CHANNELS",
    "BackboneConfig",
    "BackboneParams",
    "FpnParams",
    "patch_embed",
    "patch_merge",
    "encoder_forward",
    "fpn_fuse",
    "init_backbone_params",
    "init_fpn_params",
]


@dataclass(frozen=True)
class BackboneConfig:
    patch_size: int = 4
    depths: tuple = (1, 1, 1, 1)
    widths: tuple = (32, 64, 128, 256)
    heads: tuple = (2, 2, 4, 4)
    window: int = 4
    mlp_ratio: float = 2.0
    use_relative_bias: bool = True

    def __post_init__(self):
        if self.patch_size < 1:
            raise ConfigError("patch_size must be >= 1")
        if not (len(self.depths) == len(self.widths) == len(self.heads) == 4):
            raise ConfigError("depths, widths, heads must each have 4 entries")
        for a, b in zip(self.widths, self.widths[1:]):
            if b != 2 * a:
                raise ConfigError(f"stage widths must double: {self.widths}")

    def stage_attention(self, stage: int) -> AttentionConfig:
        return AttentionConfig(
            channels=self.widths[stage],
            heads=self.heads[stage],
            window=self.window,
            use_relative_bias=self.use_relative_bias,
            mlp_ratio=self.mlp_ratio,
        )


@dataclass
class MergeParams:
    norm_gamma: Parameter
    norm_beta: Parameter
    reduce_weight: Parameter
    reduce_bias: Parameter


@dataclass
class BackboneParams:
    embed_weight: Parameter  # (C1, 3, p, p)
    embed_bias: Parameter
    stages: list  # list[list[SwinPairParams]]
    merges: list  # list[MergeParams], one between consecutive stages


@dataclass
class FpnParams:
    lateral: dict  # level -> (weight (256, Cin, 1, 1), bias (256,))


def patch_embed(image: Tensor, p: int, weight: Parameter, bias: Parameter) -> Tensor:
    """Project non-overlapping p x p patches to the stage-1 width."""
    _, h, w = image.shape
    if h % p or w % p:
        raise ContractError(
            f"image extents {h}x{w} not divisible by patch size {p}"
        )
    return T.conv2d(image, weight, bias, stride=p)


def patch_merge(x: Tensor, params: MergeParams) -> Tensor:
    """Concatenate each 2x2 neighborhood, layer-norm, project 4c -> 2c."""
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ContractError(f"patch_merge needs even extents, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    # quadrant order (0,0), (0,1), (1,0), (1,1) along the channel axis
    grid = T.reshape(x, (c, h2, 2, w2, 2))
    grid = T.permute(grid, (1, 3, 2, 4, 0))  # (h2, w2, 2, 2, c)
    tokens = T.reshape(grid, (h2 * w2, 4 * c))
    tokens = T.layer_norm(tokens, params.norm_gamma, params.norm_beta)
    tokens = T.matmul(tokens, params.reduce_weight) + params.reduce_bias
    return T.permute(T.reshape(tokens, (h2, w2, 2 * c)), (2, 0, 1))


def _stage_forward(x: Tensor, blocks, cfg: AttentionConfig) -> Tensor:
    c, h, w = x.shape
    plane = PlaneBatch(T.reshape(T.permute(x, (1, 2, 0)), (1, h, w, c)))
    for block_params in blocks:
        plane = swin_pair_pass(plane, block_params, cfg)
    return T.permute(T.reshape(plane.tokens, (h, w, c)), (2, 0, 1))


def encoder_forward(image: Tensor, cfg: BackboneConfig, params: BackboneParams):
    """(3,H,W) image -> (C_2, C_3, C_4, C_5) feature maps."""
    p = cfg.patch_size
    _, h, w = image.shape
    if (h // p) % 8 or (w // p) % 8:
        raise ContractError(
            f"image {h}x{w} incompatible with patch size {p} and three 2x merges"
        )
    x = patch_embed(image, p, params.embed_weight, params.embed_bias)
    outputs = []
    for s in range(4):
        x = _stage_forward(x, params.stages[s], cfg.stage_attention(s))
        outputs.append(x)
        if s < 3:
            x = patch_merge(x, params.merges[s])
    return tuple(outputs)


def fpn_fuse(c2, c3, c4, c5, params: FpnParams) -> dict:
    """Top-down fusion to a dict {level: (256, H/2^level, W/2^level)}."""
    def lateral(level, feat):
        w, b = params.lateral[level]
        return T.conv2d(feat, w, b, stride=1)

    p = {5: lateral(5, c5)}
    for level, feat in ((4, c4), (3, c3), (2, c2)):
        up = T.upsample2x_nearest(p[level + 1])
        lat = lateral(level, feat)
        if up.shape != lat.shape:
            raise ContractError(
                f"upsampled level {level + 1} {up.shape} does not match "
                f"lateral level {level} {lat.shape}"
            )
        p[level] = lat + up
    p[6] = T.maxpool2x2(p[5])
    return {lvl: p[lvl] for lvl in PYRAMID_LEVELS}


def init_backbone_params(
    store: ParameterStore,
    prefix: str,
    cfg: BackboneConfig,
    image_hw: tuple[int, int],
    rng: np.random.Generator,
) -> BackboneParams:
    p = cfg.patch_size
    c1 = cfg.widths[0]
    embed_w = store.register(
        f"{prefix}.embed.weight", rng.normal(0.0, 0.02, size=(c1, 3, p, p))
    )
    embed_b = store.register(f"{prefix}.embed.bias", np.zeros(c1))

    h, w = image_hw[0] // p, image_hw[1] // p
    stages = []
    merges = []
    for s in range(4):
        acfg = cfg.stage_attention(s)
        blocks = [
            init_swin_pair_params(
                store, f"{prefix}.stage{s + 1}.pair{d}", acfg, (h, w), rng
            )
            for d in range(cfg.depths[s])
        ]
        stages.append(blocks)
        if s < 3:
            c = cfg.widths[s]
            merges.append(
                MergeParams(
                    norm_gamma=store.register(f"{prefix}.merge{s + 1}.norm.gamma", np.ones(4 * c)),
                    norm_beta=store.register(f"{prefix}.merge{s + 1}.norm.beta", np.zeros(4 * c)),
                    reduce_weight=store.register(
                        f"{prefix}.merge{s + 1}.reduce.weight",
                        rng.normal(0.0, 0.02, size=(4 * c, 2 * c)),
                    ),
                    reduce_bias=store.register(f"{prefix}.merge{s + 1}.reduce.bias", np.zeros(2 * c)),
                )
            )
            h, w = h // 2, w // 2
    return BackboneParams(embed_weight=embed_w, embed_bias=embed_b,
                          stages=stages, merges=merges)


def init_fpn_params(
    store: ParameterStore, prefix: str, cfg: BackboneConfig, rng: np.random.Generator
) -> FpnParams:
    lateral = {}
    in_ch = {2: cfg.widths[0], 3: cfg.widths[1], 4: cfg.widths[2], 5: cfg.widths[3]}
    for level, cin in in_ch.items():
        std = np.sqrt(2.0 / cin)
        w = store.register(
            f"{prefix}.lateral{level}.weight",
            rng.normal(0.0, std, size=(PYRAMID_CHANNELS, cin, 1, 1)),
        )
        b = store.register(f"{prefix}.lateral{level}.bias", np.zeros(PYRAMID_CHANNELS))
        lateral[level] = (w, b)
    return FpnParams(lateral=lateral)
