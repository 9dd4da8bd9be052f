"""Full detection model: backbone + FPN + per-level slice fusion + head.

The detector consumes 3-channel images built from consecutive volume slices
([I_{t-1}, I_t, I_{t+1}], missing slices zero-filled), computes a feature
pyramid per slice, fuses each pyramid level across the T-slice window
centered on the target slice, and predicts boxes for the center slice only.
Out-of-volume neighbors contribute zero feature maps.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .attention import AttentionConfig
from .backbone import (
    PYRAMID_LEVELS,
    BackboneConfig,
    encoder_forward,
    fpn_fuse,
    init_backbone_params,
    init_fpn_params,
)
from .detector import (
    FusionMode,
    decode_and_nms,
    fuse_level,
    head_forward,
    init_fusion_params,
    init_head_params,
)
from .errors import ConfigError
from .metrics import LesionBox
from .params import ParameterStore
from .tensor import Tensor

__all__ = ["LesionDetector", "slice_image", "detect_slice"]


def slice_image(volume: np.ndarray, t: int) -> np.ndarray:
    """(D,H,W) volume -> 3-channel image [I_{t-1}, I_t, I_{t+1}].

    Channels for slices outside the volume are zero.
    """
    d, h, w = volume.shape
    img = np.zeros((3, h, w), dtype=np.float64)
    for c, k in enumerate((t - 1, t, t + 1)):
        if 0 <= k < d:
            img[c] = volume[k]
    return img


class LesionDetector:
    """Owns every parameter of the pipeline for one fusion mode."""

    def __init__(
        self,
        image_hw: tuple[int, int],
        fusion: FusionMode,
        span: int,
        backbone_cfg: BackboneConfig,
        fusion_attention: Optional[AttentionConfig],
        seed: int,
        score_threshold: float = 0.05,
    ):
        if span % 2 != 1 or span < 1:
            raise ConfigError(f"fusion span must be odd and positive, got {span}")
        if fusion is FusionMode.VDFORMER and fusion_attention is None:
            raise ConfigError("vdformer fusion requires an attention config")
        self.image_hw = image_hw
        self.fusion = fusion
        self.span = span
        self.backbone_cfg = backbone_cfg
        self.fusion_attention = fusion_attention
        self.score_threshold = score_threshold
        self.store = ParameterStore()

        rng = np.random.default_rng(np.random.SeedSequence([0xD37EC7, seed]))
        self.backbone = init_backbone_params(
            self.store, "backbone", backbone_cfg, image_hw, rng
        )
        self.fpn = init_fpn_params(self.store, "fpn", backbone_cfg, rng)
        self.fusers = {}
        for level in PYRAMID_LEVELS:
            level_hw = (image_hw[0] // 2 ** level, image_hw[1] // 2 ** level)
            self.fusers[level] = init_fusion_params(
                self.store, fusion, level, level_hw, span, fusion_attention, rng
            )
        self.head = init_head_params(self.store, rng)

    # -- forward pieces ----------------------------------------------------

    def pyramid(self, image: np.ndarray) -> dict:
        """Encoder + FPN for one 3-channel image."""
        feats = encoder_forward(Tensor(image), self.backbone_cfg, self.backbone)
        return fpn_fuse(*feats, self.fpn)

    def fuse_window(self, pyramids: Sequence[Optional[dict]]) -> dict:
        """Fuse per-level features over the span window (None -> zeros)."""
        ref = next(p for p in pyramids if p is not None)
        fused = {}
        for level in PYRAMID_LEVELS:
            feats = []
            for p in pyramids:
                if p is None:
                    feats.append(Tensor(np.zeros(ref[level].shape)))
                else:
                    feats.append(p[level])
            fused[level] = fuse_level(feats, self.fusers[level])
        return fused

    def window_pyramids(self, volume: np.ndarray, t: int) -> list:
        """Pyramids for the span slices centered on t (None out of range).

        With fusion NONE only the center pyramid is computed; neighbors
        cannot influence the result.
        """
        d = volume.shape[0]
        half = self.span // 2
        out = []
        for k in range(t - half, t + half + 1):
            if not 0 <= k < d:
                out.append(None)
            elif self.fusion is FusionMode.NONE and k != t:
                out.append(None)
            else:
                out.append(self.pyramid(slice_image(volume, k)))
        return out

    def forward_slice(self, volume: np.ndarray, t: int) -> dict:
        """Head predictions {level: (cls, reg)} for slice t."""
        d = volume.shape[0]
        if not 0 <= t < d:
            raise IndexError(f"slice index {t} out of range [0, {d})")
        fused = self.fuse_window(self.window_pyramids(volume, t))
        return head_forward(fused, self.head)

    # -- inference ---------------------------------------------------------

    def detect_slice(self, volume: np.ndarray, t: int,
                     score_threshold: Optional[float] = None) -> list[LesionBox]:
        preds = self.forward_slice(volume, t)
        thr = self.score_threshold if score_threshold is None else score_threshold
        return decode_and_nms(preds, self.image_hw, t, score_threshold=thr)

    def detect_volume(self, volume: np.ndarray,
                      score_threshold: Optional[float] = None) -> list[LesionBox]:
        """All slices of a volume, reusing each slice's pyramid.

        Equivalent to calling detect_slice per slice, but each encoder+FPN
        runs once instead of span times.
        """
        d = volume.shape[0]
        thr = self.score_threshold if score_threshold is None else score_threshold
        if self.fusion is FusionMode.NONE:
            cache = None
        else:
            cache = [self.pyramid(slice_image(volume, k)) for k in range(d)]
        boxes = []
        half = self.span // 2
        for t in range(d):
            if cache is None:
                window = self.window_pyramids(volume, t)
            else:
                window = [
                    cache[k] if 0 <= k < d else None
                    for k in range(t - half, t + half + 1)
                ]
            fused = self.fuse_window(window)
            preds = head_forward(fused, self.head)
            boxes.extend(decode_and_nms(preds, self.image_hw, t, score_threshold=thr))
        return boxes


def detect_slice(volume: np.ndarray, t: int, model: LesionDetector,
                 score_threshold: Optional[float] = None) -> list[LesionBox]:
    return model.detect_slice(volume, t, score_threshold=score_threshold)
