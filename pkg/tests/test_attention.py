import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmtcbn import numcore as nc
from mmtcbn.attention import (
    Attention,
    attend,
    fuse_encoder_visual,
    modulate_annotations,
    visual_attend_decoder,
    visual_attend_encoder,
)
from mmtcbn.errors import EmptySupportError, KindError, PairingError, ShapeError
from mmtcbn.text_encoder import Annotations
from mmtcbn.vision import FeatureStack


def make_att(dk=4, dq=3, da=5, seed=0, normalizer="softmax"):
    return Attention(nc.ParamStore(), "att", dk, dq, da, np.random.default_rng(seed), normalizer)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 3), st.integers(1, 7), st.integers(0, 10 ** 6))
def test_attention_laws(B, N, seed):
    nc.set_precision("double")
    rng = np.random.default_rng(seed)
    att = make_att(seed=seed)
    keys = rng.normal(size=(B, N, 4))
    mask = (rng.random((B, N)) < 0.6).astype(float)
    mask[np.arange(B), rng.integers(N, size=B)] = 1.0
    query = rng.normal(size=(B, 3))
    ctx, w = att(nc.Tensor(keys), mask, nc.Tensor(query))
    np.testing.assert_allclose(w.data.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(w.data[mask == 0] == 0.0)
    lo = np.where(mask[..., None] > 0, keys, np.inf).min(axis=1)
    hi = np.where(mask[..., None] > 0, keys, -np.inf).max(axis=1)
    assert np.all(ctx.data >= lo - 1e-9) and np.all(ctx.data <= hi + 1e-9)
    perm = rng.permutation(N)
    ctx_p, w_p = att(nc.Tensor(keys[:, perm]), mask[:, perm], nc.Tensor(query))
    np.testing.assert_allclose(w_p.data, w.data[:, perm], atol=1e-12)
    np.testing.assert_allclose(ctx_p.data, ctx.data, atol=1e-12)


def test_single_key_gets_all_weight(double):
    ctx, w = attend(np.array([[1.0, 2.0, 3.0, 4.0]]), None, np.ones(3), make_att())
    assert w.data.tolist() == [1.0]
    np.testing.assert_array_equal(ctx.data, [1.0, 2.0, 3.0, 4.0])


def test_all_masked_raises():
    with pytest.raises(EmptySupportError):
        attend(np.ones((3, 4)), np.zeros(3), np.ones(3), make_att())


def test_key_dim_mismatch():
    with pytest.raises(ShapeError):
        attend(np.ones((3, 5)), None, np.ones(3), make_att())


def test_ratio_normalizer_sums_to_one(double, rng):
    att = make_att(normalizer="ratio")
    _, w = att(nc.Tensor(rng.normal(size=(2, 5, 4))), np.ones((2, 5)), nc.Tensor(rng.normal(size=(2, 3))))
    np.testing.assert_allclose(w.data.sum(axis=1), 1.0, atol=1e-10)


def test_calls_counter():
    att = make_att()
    attend(np.ones((2, 4)), None, np.ones(3), att)
    attend(np.ones((2, 4)), None, np.ones(3), att)
    assert att.calls == 2


def test_multi_query_matches_loop(double, rng):
    att = make_att()
    keys, queries = rng.normal(size=(2, 6, 4)), rng.normal(size=(2, 3, 3))
    ctx, _ = att(nc.Tensor(keys), None, nc.Tensor(queries))
    for j in range(3):
        one, _ = att(nc.Tensor(keys), None, nc.Tensor(queries[:, j]))
        np.testing.assert_allclose(ctx.data[:, j], one.data, atol=1e-12)


def test_visual_attention_needs_conv_features(double, rng):
    att = make_att()
    pooled = FeatureStack("pool5", pooled=nc.Tensor(rng.normal(size=(1, 4))))
    with pytest.raises(KindError):
        visual_attend_decoder(pooled, nc.Tensor(np.ones((1, 3))), att)
    grid = FeatureStack("conv", grid=nc.Tensor(rng.normal(size=(1, 6, 4))))
    assert visual_attend_decoder(grid, nc.Tensor(np.ones((1, 3))), att).shape == (1, 4)


def test_encoder_side_visual_reads_per_position(double, rng):
    att = make_att(dk=4, dq=6)
    grid = FeatureStack("conv", grid=nc.Tensor(rng.normal(size=(2, 5, 4))))
    ann = Annotations(nc.Tensor(rng.normal(size=(2, 3, 6))), np.ones((2, 3)))
    V = visual_attend_encoder(grid, ann, att)
    assert V.shape == (2, 3, 4)
    assert att.calls == 1


def test_pool5_gating(double, rng):
    h = rng.normal(size=(2, 3, 6))
    h[1, 2] = 0.0
    ann = Annotations(nc.Tensor(h), np.array([[1, 1, 1], [1, 1, 0.0]]))
    V, W = rng.normal(size=(2, 4)), rng.normal(size=(4, 6))
    out = modulate_annotations(ann, nc.Tensor(V), W).h.data
    np.testing.assert_allclose(out, h * np.tanh(V @ W)[:, None, :], atol=1e-12)
    assert np.all(out[1, 2] == 0.0)


def test_fusion_modes(double, rng):
    ann = Annotations(nc.Tensor(rng.normal(size=(2, 3, 6))), np.array([[1, 1, 1], [1, 0, 0.0]]))
    V = nc.Tensor(rng.normal(size=(2, 3, 4)))
    gated = fuse_encoder_visual(ann, V, rng.normal(size=(4, 6)), "gate").h.data
    cat = fuse_encoder_visual(ann, V, rng.normal(size=(10, 6)), "concat").h.data
    for out in (gated, cat):
        assert out.shape == (2, 3, 6)
        assert np.all(out[1, 1:] == 0.0)
    with pytest.raises(PairingError):
        fuse_encoder_visual(ann, nc.Tensor(np.ones((2, 2, 4))), rng.normal(size=(4, 6)))
