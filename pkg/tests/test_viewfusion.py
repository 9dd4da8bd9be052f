"""Three-view cascade: slice-window assembly, per-view plane layout,
center-slice selection, 3D information flow, gradients."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from vdformer import tensor as T
from vdformer.attention import AttentionConfig
from vdformer.errors import ContractError
from vdformer.gradcheck import check_gradients
from vdformer.params import ParameterStore
from vdformer.tensor import Tape, Tensor
from vdformer.viewfusion import (
    View,
    extract_slice_window,
    init_vdformer_params,
    vd_former,
    view_pass,
    view_plane_dims,
)


def _cfg(c=6, heads=2, w=2, bias=True, mlp=1.0):
    return AttentionConfig(channels=c, heads=heads, window=w,
                           use_relative_bias=bias, mlp_ratio=mlp)


def _params(cfg, h, w, t, seed=0):
    store = ParameterStore()
    params = init_vdformer_params(
        store, "vdformer", cfg, h, w, t, np.random.default_rng(seed)
    )
    return store, params


def _zero_output_paths(params):
    for pair in params.per_view.values():
        for blk in pair.blocks:
            blk.proj_weight.data[:] = 0.0
            blk.proj_bias.data[:] = 0.0
            blk.fc2_weight.data[:] = 0.0
            blk.fc2_bias.data[:] = 0.0


def _features(rng, n, c, h, w):
    return [Tensor(rng.standard_normal((c, h, w))) for _ in range(n)]


# ---------------------------------------------------------------------------
# extract_slice_window
# ---------------------------------------------------------------------------

def test_window_span_one_is_single_slice(rng):
    feats = _features(rng, 4, 3, 5, 5)
    stack = extract_slice_window(feats, 2, 1)
    assert stack.data.shape == (3, 5, 5, 1)
    assert_array_equal(stack.data.data[..., 0], feats[2].data)


def test_window_at_start_zero_pads_leading_slice(rng):
    feats = _features(rng, 4, 2, 4, 4)
    stack = extract_slice_window(feats, 0, 3)
    assert_array_equal(stack.data.data[..., 0], np.zeros((2, 4, 4)))
    assert_array_equal(stack.data.data[..., 1], feats[0].data)
    assert_array_equal(stack.data.data[..., 2], feats[1].data)


def test_interior_window_is_bitwise_concatenation(rng):
    feats = _features(rng, 5, 2, 3, 3)
    stack = extract_slice_window(feats, 2, 3)
    for k, f in enumerate(feats[1:4]):
        assert_array_equal(stack.data.data[..., k], f.data)


def test_window_rejects_out_of_range_index(rng):
    feats = _features(rng, 3, 2, 3, 3)
    with pytest.raises(IndexError):
        extract_slice_window(feats, 3, 3)


def test_window_rejects_even_span(rng):
    feats = _features(rng, 3, 2, 3, 3)
    with pytest.raises(ContractError):
        extract_slice_window(feats, 1, 2)


# ---------------------------------------------------------------------------
# view_pass layout
# ---------------------------------------------------------------------------

def test_view_pass_identity_when_outputs_zeroed(rng):
    cfg = _cfg()
    store, params = _params(cfg, 4, 5, 3, seed=1)
    _zero_output_paths(params)
    x = Tensor(rng.standard_normal((6, 4, 5, 3)))
    for view in View:
        out = view_pass(x, view, params.per_view[view], cfg)
        assert_array_equal(out.data, x.data)


def test_view_wt_plane_layout():
    # attention sink exposes the internal plane batch: with a single window
    # covering the whole plane, block 1 emits (B, heads, Lr*Lc, Lr*Lc)
    c, h, w, t = 4, 5, 3, 3
    cfg = _cfg(c=c, heads=1, w=4)
    store, params = _params(cfg, h, w, t, seed=2)
    x = Tensor(np.random.default_rng(0).standard_normal((c, h, w, t)))
    sink = []
    view_pass(x, View.WT, params.per_view[View.WT], cfg, attn_sink=sink)
    assert sink[0].shape == (h, 1, w * t, w * t)  # B=H planes of W x T tokens
    assert view_plane_dims(View.WT, h, w, t) == (w, t)
    assert view_plane_dims(View.HT, h, w, t) == (h, t)
    assert view_plane_dims(View.HW, h, w, t) == (h, w)


def test_view_hw_single_slice_equals_dense_2d_attention(rng):
    # T=1, w >= max(H,W): the HW pass's first block is dense attention over
    # the full H x W plane
    c, h, w = 6, 3, 4
    cfg = _cfg(c=c, heads=1, w=4, bias=False)
    store, params = _params(cfg, h, w, 1, seed=3)
    x = rng.standard_normal((c, h, w, 1))
    sink = []
    view_pass(Tensor(x), View.HW, params.per_view[View.HW], cfg, attn_sink=sink)
    attn = sink[0]
    assert attn.shape == (1, 1, h * w, h * w)

    blk = params.per_view[View.HW].blocks[0]
    tokens = x[..., 0].transpose(1, 2, 0).reshape(h * w, c)
    mu = tokens.mean(-1, keepdims=True)
    var = ((tokens - mu) ** 2).mean(-1, keepdims=True)
    normed = (tokens - mu) / np.sqrt(var + 1e-5) * blk.norm1_gamma.data + blk.norm1_beta.data
    qkv = normed @ blk.qkv_weight.data + blk.qkv_bias.data
    q, k = qkv[:, :c], qkv[:, c : 2 * c]
    logits = q @ k.T / math.sqrt(c)
    e = np.exp(logits - logits.max(-1, keepdims=True))
    dense = e / e.sum(-1, keepdims=True)
    assert_allclose(attn[0, 0], dense, atol=1e-10, rtol=0)


# ---------------------------------------------------------------------------
# vd_former
# ---------------------------------------------------------------------------

def test_vd_former_output_shape(rng):
    cfg = _cfg()
    store, params = _params(cfg, 4, 6, 3, seed=4)
    stack = extract_slice_window(_features(rng, 5, 6, 4, 6), 2, 3)
    out = vd_former(stack, params, cfg)
    assert out.shape == (6, 4, 6)


def test_vd_former_zeroed_outputs_reproduce_center_slice(rng):
    cfg = _cfg()
    store, params = _params(cfg, 4, 5, 3, seed=5)
    _zero_output_paths(params)
    feats = _features(rng, 6, 6, 4, 5)
    stack = extract_slice_window(feats, 3, 3)
    out = vd_former(stack, params, cfg)
    assert_array_equal(out.data, feats[3].data)


@settings(max_examples=10)
@given(
    c=st.sampled_from([2, 4]), h=st.integers(1, 5), w=st.integers(1, 5),
    t=st.sampled_from([1, 3]),
)
def test_vd_former_shape_contract(c, h, w, t):
    cfg = _cfg(c=c, heads=1, w=2)
    store, params = _params(cfg, h, w, t, seed=6)
    rng = np.random.default_rng(c + h + w + t)
    stack = extract_slice_window(_features(rng, max(t, 4), c, h, w), t // 2, t)
    assert vd_former(stack, params, cfg).shape == (c, h, w)


def test_vd_former_determinism(rng):
    cfg = _cfg()
    store, params = _params(cfg, 4, 4, 3, seed=7)
    feats = _features(rng, 5, 6, 4, 4)
    stack = extract_slice_window(feats, 2, 3)
    a = vd_former(stack, params, cfg)
    b = vd_former(stack, params, cfg)
    assert_array_equal(a.data, b.data)


def test_vd_former_gradients(rng):
    cfg = _cfg(c=4, heads=2, w=2, mlp=1.0)
    store, params = _params(cfg, 3, 4, 3, seed=8)
    x = Tensor(np.random.default_rng(42).standard_normal((4, 3, 4, 3)),
               requires_grad=True)
    probe = Tensor(rng.standard_normal((4, 3, 4)))

    from vdformer.viewfusion import SliceStack

    def fn():
        out = vd_former(SliceStack(data=x, center=1, span=3), params, cfg)
        return T.sum_all(T.mul(out, probe))

    check_gradients(fn, [x, *store], max_per_tensor=3)


# ---------------------------------------------------------------------------
# 3D information flow
# ---------------------------------------------------------------------------

def _cascade_center(feats, t, params, cfg):
    stack = extract_slice_window(feats, t, 3)
    return vd_former(stack, params, cfg).data


def test_neighbor_slice_influences_center_through_t_mixing_views(rng):
    cfg = _cfg(c=4, heads=1, w=2)
    store, params = _params(cfg, 4, 4, 3, seed=9)
    feats = _features(rng, 5, 4, 4, 4)
    base = _cascade_center(feats, 2, params, cfg)

    bumped = [Tensor(f.data.copy()) for f in feats]
    bumped[1].data[0, 0, 0] += 1.0
    changed = _cascade_center(bumped, 2, params, cfg)
    assert np.abs(changed - base).max() > 1e-8


def test_neighbor_slice_ignored_when_t_mixing_views_are_identity(rng):
    cfg = _cfg(c=4, heads=1, w=2)
    store, params = _params(cfg, 4, 4, 3, seed=10)
    for view in (View.WT, View.HT):
        for blk in params.per_view[view].blocks:
            blk.proj_weight.data[:] = 0.0
            blk.proj_bias.data[:] = 0.0
            blk.fc2_weight.data[:] = 0.0
            blk.fc2_bias.data[:] = 0.0
    feats = _features(rng, 5, 4, 4, 4)
    base = _cascade_center(feats, 2, params, cfg)

    bumped = [Tensor(f.data.copy()) for f in feats]
    bumped[1].data += rng.standard_normal(bumped[1].shape)
    changed = _cascade_center(bumped, 2, params, cfg)
    assert_array_equal(changed, base)
