"""Full translation model: wires encoder, ResNet, visual fusion and decoder per variant."""
from __future__ import annotations

import numpy as np

from . import numcore as nc
from .attention import (
    Attention,
    fuse_encoder_visual,
    modulate_annotations,
    visual_attend_encoder,
)
from .config import ModelConfig
from .decoder import CGRUDecoder, Hypothesis, VisualContext
from .text_encoder import TextEncoder, init_matrix
from .vision import ResNet, feature_shapes


class MMTModel:
    """Encoder-decoder translator whose image branch is steered by the source text.

    Building a model switches the global working precision to ``cfg.precision``.
    ``training`` selects batch statistics (True) or running statistics (False) in
    every normalisation layer.
    """

    def __init__(self, cfg: ModelConfig, src_vocab_size: int, tgt_vocab_size: int, seed: int = 0):
        cfg.validate()
        nc.set_precision(cfg.precision)
        self.cfg = cfg
        self.src_vocab_size, self.tgt_vocab_size = src_vocab_size, tgt_vocab_size
        self.store = nc.ParamStore()
        self.training = True
        rng = np.random.default_rng(seed)
        d_gru, d_att = cfg.gru_and_cgru_layer_size, cfg.attention_size
        D = 2 * d_gru

        self.encoder = TextEncoder(
            self.store, src_vocab_size, cfg.source_and_target_embeddings, d_gru, cfg.conditioning_size,
            rng, layer_norm=cfg.layer_norm == "gates", ln_eps=cfg.layer_norm_epsilon,
            keep_in=cfg.gru_input_dropout, keep_out=cfg.gru_output_dropout,
            stop_gradient_q=cfg.stop_gradient_q)

        self.resnet = None
        self.visual_att = None
        self.W_pool = None
        d_visual = 0
        if cfg.uses_images:
            self.resnet = ResNet(self.store, cfg, rng)
            shapes = feature_shapes(cfg)
            d_loc = shapes["grid"][1]
            if cfg.features == "pool5":
                self.W_pool = self.store.add("visual.W_pool", init_matrix(rng, shapes["pool5"], D))
            elif cfg.visual_attention == "decoder":
                self.visual_att = Attention(self.store, "visual_dec", d_loc, d_gru, d_att, rng,
                                            cfg.attention_normalizer)
                if cfg.conv_remodulate:
                    self.W_pool = self.store.add("visual.W_pool", init_matrix(rng, d_loc, D))
                else:
                    d_visual = d_loc
            else:
                self.visual_att = Attention(self.store, "visual_enc", d_loc, D, d_att, rng,
                                            cfg.attention_normalizer)
                fan_in = D + d_loc if cfg.fusion == "concat" else d_loc
                self.W_pool = self.store.add("visual.W_pool", init_matrix(rng, fan_in, D))

        self.decoder = CGRUDecoder(
            self.store, tgt_vocab_size, cfg.source_and_target_embeddings, d_gru, D, d_att, rng,
            d_visual=d_visual, normalizer=cfg.attention_normalizer,
            keep_in=cfg.cgru_input_dropout, keep_out=cfg.cgru_output_dropout,
            keep_softmax=cfg.softmax_output_dropout)

    # ------------------------------------------------------------------ plumbing

    @property
    def params(self) -> nc.ParamStore:
        return self.store

    def norm_layers(self) -> dict:
        if self.resnet is None:
            return {}
        return {n.bn.name: n.bn for n in self.resnet.norms()}

    def cast(self, mode: str) -> None:
        nc.set_precision(mode)
        self.store.cast(nc.get_dtype())
        self.cfg = self.cfg.replace(precision=mode)

    def eval(self) -> "MMTModel":
        self.training = False
        return self

    def train(self) -> "MMTModel":
        self.training = True
        return self

    def attention_counters(self) -> dict:
        counts = {"text": self.decoder.att.calls}
        if self.visual_att is not None:
            counts["visual"] = self.visual_att.calls
        return counts

    # ------------------------------------------------------------------ forward

    def annotate(self, src_ids, src_mask, images=None, rng=None):
        """Source annotations as the decoder will see them, plus the per-step visual context."""
        cfg = self.cfg
        ann = self.encoder.encode(src_ids, src_mask, rng)
        if self.resnet is None:
            return ann, None
        q = self.encoder.pool_conditioning(ann) if cfg.cbn_stages else None
        feats = self.resnet.forward_features(images, q, cfg.features, self.training)
        if cfg.features == "pool5":
            return modulate_annotations(ann, feats.pooled, self.W_pool), None
        if cfg.visual_attention == "decoder":
            return ann, VisualContext(feats.grid, self.visual_att, self.W_pool, cfg.conv_remodulate)
        V = visual_attend_encoder(feats, ann, self.visual_att)
        return fuse_encoder_visual(ann, V, self.W_pool, cfg.fusion), None

    def logits(self, src_ids, src_mask, images, tgt_in, rng=None) -> nc.Tensor:
        ann, visual = self.annotate(src_ids, src_mask, images, rng)
        return self.decoder.teacher_forced_logits(ann, tgt_in, visual, rng)

    def loss(self, batch, rng=None) -> nc.Tensor:
        """Mean negative log-likelihood of the gold target tokens (teacher forcing)."""
        tgt = np.asarray(batch.tgt_ids)
        lg = self.logits(batch.src_ids, batch.src_mask, batch.images, tgt[:, :-1], rng)
        return nc.cross_entropy(lg, tgt[:, 1:], np.asarray(batch.tgt_mask)[:, 1:])

    # ------------------------------------------------------------------ inference

    def translate(self, src_ids, src_mask=None, images=None, beam: int | None = None,
                  max_len: int | None = None) -> Hypothesis:
        """Beam-search one sentence with running statistics (batch of one)."""
        was_training = self.training
        self.training = False
        try:
            with nc.no_grad():
                ids = np.asarray(src_ids, dtype=np.int64).reshape(1, -1)
                mask = np.ones(ids.shape) if src_mask is None else np.asarray(src_mask).reshape(1, -1)
                if images is not None:
                    images = np.asarray(images, dtype=nc.get_dtype())
                    if images.ndim == 3:
                        images = images[None]
                ann, visual = self.annotate(ids, mask, images)
                beam = beam or self.cfg.inference_beam_size
                max_len = max_len or self.cfg.max_len_factor * int(mask.sum())
                return self.decoder.beam_search(ann, beam, max_len, visual, self.cfg.length_penalty)
        finally:
            self.training = was_training

    def greedy(self, src_ids, src_mask, images=None, max_len: int = 20) -> list[list[int]]:
        was_training = self.training
        self.training = False
        try:
            with nc.no_grad():
                ann, visual = self.annotate(src_ids, src_mask, images)
                return self.decoder.greedy(ann, max_len, visual)
        finally:
            self.training = was_training
