import numpy as np
import pytest

from mmtcbn import numcore as nc
from mmtcbn.config import VARIANTS, variant_config
from mmtcbn.model import MMTModel
from mmtcbn.training import gradcheck_batch

from conftest import tiny_config


@pytest.fixture(params=VARIANTS)
def variant(request):
    return request.param


def build(variant, **kw):
    cfg = variant_config(variant, tiny_config(**kw))
    return MMTModel(cfg, 7, 7, seed=1), gradcheck_batch(cfg)


def test_every_variant_runs(variant):
    model, batch = build(variant)
    loss = model.loss(batch)
    assert np.isfinite(float(loss.data))
    lg = model.logits(batch.src_ids, batch.src_mask, batch.images, batch.tgt_ids[:, :-1])
    assert lg.shape == (2, 3, 7)
    hyp = model.translate([4, 5], images=batch.images[0], beam=2, max_len=4)
    assert 1 <= len(hyp.tokens) <= 4


def test_text_only_ignores_images():
    model, batch = build("text_only")
    assert model.resnet is None
    a = model.loss(batch).data
    batch.images = batch.images * 0 + 5.0
    assert model.loss(batch).data == a


def test_image_changes_output_when_used():
    model, batch = build("cbn_pool5")
    a = model.loss(batch).data
    batch.images = batch.images[::-1].copy()
    assert model.loss(batch).data != a


def test_one_decoder_attention_per_step_enc_att():
    model, batch = build("cbn_enc_att")
    model.loss(batch)
    counts = model.attention_counters()
    K = batch.tgt_ids.shape[1] - 1
    assert counts == {"text": K, "visual": 1}


def test_decoder_side_visual_reads_every_step():
    model, batch = build("cbn_conv")
    model.loss(batch)
    K = batch.tgt_ids.shape[1] - 1
    assert model.attention_counters() == {"text": K, "visual": K}


def test_remodulate_variant_runs():
    model, batch = build("cbn_conv", conv_remodulate=True)
    assert model.decoder.W_v is None and model.W_pool is not None
    assert np.isfinite(float(model.loss(batch).data))


def test_concat_fusion_and_ratio_normalizer():
    model, batch = build("cbn_enc_att", fusion="concat", attention_normalizer="ratio")
    assert np.isfinite(float(model.loss(batch).data))


def test_precision_and_cast():
    model, _ = build("cbn_pool5")
    assert all(p.data.dtype == np.float64 for p in model.store)
    model.cast("single")
    assert all(p.data.dtype == np.float32 for p in model.store)
    assert nc.precision_name() == "single"


def test_translate_uses_running_stats_and_restores_mode():
    model, batch = build("cbn_pool5")
    before = {k: v.running_mean.copy() for k, v in model.norm_layers().items()}
    model.translate([4, 5], images=batch.images[0], beam=2, max_len=3)
    assert model.training
    for k, v in model.norm_layers().items():
        np.testing.assert_array_equal(v.running_mean, before[k])


def test_gradient_reaches_encoder_through_cbn(double):
    cfg = variant_config("cbn_pool5", tiny_config())
    model = MMTModel(cfg, 7, 7, seed=1)
    batch = gradcheck_batch(cfg)
    for p in model.store.trainable():
        if p.name.endswith(".W2"):
            p.value.data = np.random.default_rng(0).normal(size=p.shape)
    model.store.zero_grad()
    model.loss(batch).backward()
    assert np.abs(model.encoder.W_q.grad).sum() > 0
