"""View-disentangled windowed attention for 3D lesion detection.

A float64 tape-autodiff tensor engine, Swin-style windowed attention, a
three-view cascaded fusion module over consecutive slice features, a toy
pyramid-backbone detector, synthetic sphere/tube volumes with FROC and mAP
evaluation, and an analytic attention cost model.
"""

__version__ = "0.1.0"
