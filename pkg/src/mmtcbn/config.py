"""Model / training configuration and the flat ``key = value`` file format.

Keys are descriptive snake_case names (``gru_and_cgru_layer_size = 256``).
Defaults are full-size settings; ``desk_config`` shrinks the model to something
a laptop CPU trains in minutes.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

VARIANTS = (
    "baseline_pool5_frozen_pretrainless",
    "cbn_conv",
    "cbn_pool5",
    "cbn_pool5_v2",
    "cbn_pool5_finetune",
    "cbn_enc_att",
    "text_only",
)

CBN_STAGE_SETS = {"all": (1, 2, 3, 4), "2-4": (2, 3, 4), "3-4": (3, 4), "none": ()}


@dataclass
class ModelConfig:
    # sequence-to-sequence settings
    source_and_target_embeddings: int = 128
    gru_and_cgru_layer_size: int = 256
    attention_size: int = 256
    gru_input_dropout: float = 0.7
    gru_output_dropout: float = 0.5
    cgru_input_dropout: float = 1.0
    cgru_output_dropout: float = 1.0
    softmax_output_dropout: float = 0.5
    optimizer: str = "adam"
    learning_rate: float = 0.0004
    optimizer_epsilon: float = 8e-7
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    batch_size: int = 32
    inference_beam_size: int = 12

    # resnet settings
    resnet_version: str = "v1"
    resnet_input_size: tuple = (32, 32, 3)
    cbn_inference: str = "moving_average"
    cbn_decay: float = 0.99
    cbn_damping_factor: float = 1e-5
    cbn_mlp_hidden_units: int = 512
    blocks_with_cbn: str = "all"

    # mini-resnet layout
    stage_channels: tuple = (16, 32, 64, 128)
    blocks_per_stage: tuple = (1, 1, 1, 1)
    stage_strides: tuple = (1, 2, 2, 1)
    stem_channels: int = 0             # 0 -> same as the first stage
    stem_kernel: int = 3
    stem_stride: int = 1
    stem_pool: bool = False
    conv_extraction_stage: int = 3
    cbn_enabled: bool = True
    finetune_last_stage: bool = False

    # wiring
    features: str = "pool5"            # pool5 | conv | none
    visual_attention: str = "none"     # none | decoder | encoder
    fusion: str = "gate"               # gate | concat
    conv_remodulate: bool = False
    attention_normalizer: str = "softmax"  # softmax | ratio
    layer_norm: str = "gates"          # gates | none
    conditioning_size: int = 256
    stop_gradient_q: bool = False
    layer_norm_epsilon: float = 1e-5

    # decoding
    length_penalty: float = 0.0
    max_len_factor: int = 3

    # data / training
    bpe_merges: int = 10000
    max_sentence_length: int = 80
    preprocessing: str = "vgg"
    brightness_delta: float = 32.0 / 255.0
    contrast_range: tuple = (0.5, 1.5)
    saturation_range: tuple = (0.5, 1.5)
    hue_delta: float = 0.2
    patience: int = 500
    max_steps: int = 3000
    # stand-in for ImageNet: shape/colour classification of synthetic images before freezing
    pretrain_steps: int = 0
    pretrain_learning_rate: float = 0.01
    pretrain_images: int = 2000
    eval_every: int = 100
    seed: int = 1
    precision: str = "single"
    variant: str = "cbn_pool5"

    @property
    def cbn_stages(self) -> tuple:
        if not self.cbn_enabled:
            return ()
        return CBN_STAGE_SETS[self.blocks_with_cbn]

    @property
    def uses_images(self) -> bool:
        return self.features != "none"

    def replace(self, **changes) -> "ModelConfig":
        cfg = dataclasses.replace(self, **changes)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.features in ("pool5", "conv", "none"), f"features: bad value {self.features!r}")
        need(self.visual_attention in ("none", "decoder", "encoder"),
             f"visual_attention: bad value {self.visual_attention!r}")
        need(self.visual_attention == "none" or self.features == "conv",
             "visual attention needs features = conv")
        need(self.features != "conv" or self.visual_attention != "none",
             "features = conv needs a visual_attention mode")
        need(self.fusion in ("gate", "concat"), f"fusion: bad value {self.fusion!r}")
        need(self.attention_normalizer in ("softmax", "ratio"),
             f"attention_normalizer: bad value {self.attention_normalizer!r}")
        need(self.layer_norm in ("gates", "none"), f"layer_norm: bad value {self.layer_norm!r}")
        need(self.resnet_version in ("v1", "v2"), f"resnet_version: bad value {self.resnet_version!r}")
        # both labels run the same exponential moving average; the label is descriptive only
        need(self.cbn_inference in ("moving_average", "exponential_moving_average"),
             f"cbn_inference: bad value {self.cbn_inference!r}")
        need(self.blocks_with_cbn in CBN_STAGE_SETS, f"blocks_with_cbn: bad value {self.blocks_with_cbn!r}")
        need(self.preprocessing in ("vgg", "inception"), f"preprocessing: bad value {self.preprocessing!r}")
        need(self.precision in ("single", "double"), f"precision: bad value {self.precision!r}")
        need(self.variant in VARIANTS, f"variant: unknown {self.variant!r}")
        need(len(self.stage_channels) == 4, "stage_channels needs four entries")
        need(all(a < b for a, b in zip(self.stage_channels, self.stage_channels[1:])),
             "stage_channels must be strictly increasing")
        need(len(self.blocks_per_stage) == 4 and min(self.blocks_per_stage) >= 1,
             "blocks_per_stage needs four positive entries")
        need(len(self.stage_strides) == 4, "stage_strides needs four entries")
        need(1 <= self.conv_extraction_stage <= 4, "conv_extraction_stage must be in 1..4")
        need(0 < self.cbn_decay < 1, "cbn_decay must be in (0, 1)")
        need(self.cbn_damping_factor > 0, "cbn_damping_factor must be positive")
        need(self.learning_rate >= 0 and self.optimizer_epsilon > 0, "bad optimizer settings")
        for name in ("gru_input_dropout", "gru_output_dropout", "cgru_input_dropout",
                     "cgru_output_dropout", "softmax_output_dropout"):
            v = getattr(self, name)
            need(0 < v <= 1, f"{name} is a keep probability and must be in (0, 1]")
        need(self.bpe_merges >= 0, "bpe_merges must be >= 0")
        need(self.pretrain_steps >= 0 and self.pretrain_images >= 1, "bad pretraining settings")
        need(len(self.resnet_input_size) == 3 and self.resnet_input_size[2] == 3,
             "resnet_input_size must be HxWx3")

    # ---------------------------------------------------------------- file io

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text: str, base: "ModelConfig | None" = None) -> "ModelConfig":
        known = {f.name: f for f in fields(cls)}
        values = dataclasses.asdict(base) if base is not None else {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            default = getattr(base, key) if base is not None else known[key].default
            try:
                values[key] = _parse(value, default)
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
        cfg = cls(**values)
        try:
            cfg.validate()
        except ConfigError as exc:
            raise ConfigError(f"{exc}") from None
        return cfg

    @classmethod
    def load(cls, path, base: "ModelConfig | None" = None) -> "ModelConfig":
        return cls.from_text(Path(path).read_text(), base)


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        if v and all(isinstance(x, int) for x in v) and len(v) == 3 and v[2] == 3:
            return "x".join(str(x) for x in v)
        return ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(text: str, default):
    if isinstance(default, bool):
        low = text.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        parts = [p.strip() for p in text.replace("x", ",").split(",") if p.strip()]
        kind = type(default[0]) if default else int
        return tuple(kind(p) for p in parts)
    return text


def variant_config(variant: str, base: ModelConfig | None = None) -> ModelConfig:
    """Wire one named model variant on top of ``base``."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; valid: {', '.join(VARIANTS)}")
    base = base or ModelConfig()
    wiring = {
        "baseline_pool5_frozen_pretrainless": dict(features="pool5", visual_attention="none",
                                                   cbn_enabled=False, resnet_version="v1"),
        "cbn_conv": dict(features="conv", visual_attention="decoder", cbn_enabled=True,
                         resnet_version="v1"),
        "cbn_pool5": dict(features="pool5", visual_attention="none", cbn_enabled=True,
                          resnet_version="v1"),
        "cbn_pool5_v2": dict(features="pool5", visual_attention="none", cbn_enabled=True,
                             resnet_version="v2", preprocessing="inception",
                             cbn_inference="exponential_moving_average"),
        "cbn_pool5_finetune": dict(features="pool5", visual_attention="none", cbn_enabled=True,
                                   resnet_version="v1", finetune_last_stage=True),
        "cbn_enc_att": dict(features="conv", visual_attention="encoder", cbn_enabled=True,
                            resnet_version="v1"),
        "text_only": dict(features="none", visual_attention="none", cbn_enabled=False),
    }[variant]
    wiring.setdefault("finetune_last_stage", False)
    return base.replace(variant=variant, **wiring)


def desk_config(**overrides) -> ModelConfig:
    """Small dimensions for CPU experiments; dropout off so overfit checks are crisp."""
    cfg = ModelConfig(
        source_and_target_embeddings=16, gru_and_cgru_layer_size=20, attention_size=20,
        conditioning_size=20, cbn_mlp_hidden_units=32,
        gru_input_dropout=1.0, gru_output_dropout=1.0, softmax_output_dropout=1.0,
        resnet_input_size=(16, 16, 3), stage_channels=(8, 16, 32, 64),
        stage_strides=(1, 2, 2, 1), conv_extraction_stage=3,
        learning_rate=0.005, batch_size=32, bpe_merges=200, patience=500, eval_every=50,
        max_steps=3000, inference_beam_size=4, pretrain_steps=300,
    )
    return cfg.replace(**overrides) if overrides else cfg


def resnet50_config(**overrides) -> ModelConfig:
    """ResNet-50-sized layout: 224 input, stem conv/2 + pool/2, strides at stages 1-3."""
    cfg = ModelConfig(
        resnet_input_size=(224, 224, 3), stage_channels=(256, 512, 1024, 2048),
        blocks_per_stage=(3, 4, 6, 3), stage_strides=(2, 2, 2, 1),
        stem_channels=64, stem_kernel=7, stem_stride=2, stem_pool=True, conv_extraction_stage=3,
    )
    return cfg.replace(**overrides) if overrides else cfg
