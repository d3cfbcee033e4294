import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmtcbn.config import VARIANTS, ModelConfig, desk_config, resnet50_config, variant_config
from mmtcbn.errors import ConfigError


def test_reference_defaults():
    cfg = ModelConfig()
    assert cfg.source_and_target_embeddings == 128
    assert cfg.gru_and_cgru_layer_size == 256
    assert cfg.learning_rate == 0.0004
    assert cfg.optimizer_epsilon == 8e-7
    assert cfg.batch_size == 32
    assert cfg.inference_beam_size == 12
    assert cfg.cbn_decay == 0.99 and cfg.cbn_damping_factor == 1e-5
    assert cfg.cbn_mlp_hidden_units == 512
    assert (cfg.gru_input_dropout, cfg.gru_output_dropout, cfg.softmax_output_dropout) == (0.7, 0.5, 0.5)


def test_text_round_trip(tmp_path):
    cfg = resnet50_config(seed=7, fusion="concat")
    cfg.save(tmp_path / "c.txt")
    assert ModelConfig.load(tmp_path / "c.txt") == cfg


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(VARIANTS), st.integers(0, 1000), st.floats(1e-6, 1.0), st.booleans())
def test_round_trip_property(variant, seed, lr, remod):
    cfg = variant_config(variant, desk_config(seed=seed, learning_rate=lr, conv_remodulate=remod))
    assert ModelConfig.from_text(cfg.to_text()) == cfg


def test_override_on_base_with_comments():
    cfg = ModelConfig.from_text("# comment\nbatch_size = 8  # small\n\n", desk_config())
    assert cfg.batch_size == 8 and cfg.gru_and_cgru_layer_size == 20


@pytest.mark.parametrize("text, where", [
    ("batch_size = 8\nnonsense", "line 2"),
    ("batch_size = 8\nfoo = 1", "line 2"),
    ("batch_size = eight", "line 1"),
    ("cbn_enabled = maybe", "line 1"),
])
def test_parse_errors_name_the_line(text, where):
    with pytest.raises(ConfigError, match=where):
        ModelConfig.from_text(text)


@pytest.mark.parametrize("change", [
    dict(stage_channels=(16, 16, 32, 64)),
    dict(gru_input_dropout=0.0),
    dict(cbn_decay=1.0),
    dict(features="conv", visual_attention="none"),
    dict(features="pool5", visual_attention="decoder"),
    dict(blocks_with_cbn="1-2"),
    dict(cbn_inference="median"),
])
def test_validation(change):
    with pytest.raises(ConfigError):
        desk_config(**change)


def test_variant_wiring():
    assert variant_config("cbn_enc_att").visual_attention == "encoder"
    assert variant_config("cbn_conv").visual_attention == "decoder"
    assert variant_config("cbn_pool5_finetune").finetune_last_stage
    assert variant_config("cbn_pool5_v2").resnet_version == "v2"
    assert not variant_config("baseline_pool5_frozen_pretrainless").cbn_stages
    assert not variant_config("text_only").uses_images
    with pytest.raises(ConfigError, match="cbn_pool5"):
        variant_config("cbn_pool6")


def test_cbn_stage_sets():
    assert desk_config(blocks_with_cbn="2-4").cbn_stages == (2, 3, 4)
    assert desk_config(cbn_enabled=False).cbn_stages == ()
