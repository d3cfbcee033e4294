"""Conditional-GRU decoder: two stacked GRUs with an attention read between them."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .attention import Attention, modulate_annotations
from .errors import ParameterError, ShapeError
from .text_encoder import Annotations, Embedding, GRUCell, init_matrix, masked_mean

PAD, BOS, EOS, UNK = 0, 1, 2, 3


@dataclass
class DecoderState:
    s_hat: nc.Tensor           # [B, d_gru]
    y_prev: np.ndarray         # [B] token ids
    step: int = 0


@dataclass
class StepOutput:
    state: DecoderState
    c_t: nc.Tensor
    s_t: nc.Tensor
    V_t: nc.Tensor | None
    y_emb: nc.Tensor


@dataclass
class Hypothesis:
    tokens: list
    log_prob: float
    state: DecoderState | None = None
    finished: bool = False
    steps_to_finish: int = field(default=0, repr=False)


@dataclass
class VisualContext:
    """Spatial features read once per decoder step (decoder-side visual attention)."""

    grid: nc.Tensor
    attention: Attention
    W_pool: nc.Parameter | None = None
    remodulate: bool = False
    key_proj: nc.Tensor | None = None

    def __post_init__(self):
        if self.key_proj is None:
            self.key_proj = self.attention.project_keys(self.grid)

    def read(self, s_t: nc.Tensor) -> nc.Tensor:
        context, _ = self.attention(self.grid, None, s_t, self.key_proj)
        return context

    def repeat(self, k: int) -> "VisualContext":
        grid = nc.Tensor(np.repeat(self.grid.data, k, axis=0))
        kp = nc.Tensor(np.repeat(self.key_proj.data, k, axis=0))
        return VisualContext(grid, self.attention, self.W_pool, self.remodulate, kp)


def _repeat_ann(ann: Annotations, k: int) -> Annotations:
    return Annotations(nc.Tensor(np.repeat(ann.h.data, k, axis=0)), np.repeat(ann.mask, k, axis=0))


class CGRUDecoder:
    def __init__(self, store: nc.ParamStore, vocab_size: int, d_emb: int, d_gru: int, d_ann: int,
                 d_att: int, rng, d_visual: int = 0, normalizer: str = "softmax",
                 keep_in: float = 1.0, keep_out: float = 1.0, keep_softmax: float = 1.0):
        self.embed = Embedding(store, "decoder.embed", vocab_size, d_emb, rng)
        self.W_init = store.add("decoder.W_init", init_matrix(rng, d_ann, d_gru))
        self.rec1 = GRUCell(store, "decoder.rec1", d_emb, d_gru, rng)
        self.att = Attention(store, "decoder.att", d_ann, d_gru, d_att, rng, normalizer)
        self.rec2 = GRUCell(store, "decoder.rec2", d_ann, d_gru, rng)
        # o_t lives in embedding space so the previous-word embedding can be added directly
        self.W_shat = store.add("decoder.W_shat", init_matrix(rng, d_gru, d_emb))
        self.W_c = store.add("decoder.W_c", init_matrix(rng, d_ann, d_emb))
        self.W_v = store.add("decoder.W_v", init_matrix(rng, d_visual, d_emb)) if d_visual else None
        self.W_o = store.add("decoder.W_o", init_matrix(rng, d_emb, vocab_size))
        self.b_o = store.add("decoder.b_o", np.zeros(vocab_size))
        self.vocab_size = vocab_size
        self.keep_in, self.keep_out, self.keep_softmax = keep_in, keep_out, keep_softmax

    # ------------------------------------------------------------------ one step

    def init_state(self, ann: Annotations) -> DecoderState:
        s0 = nc.tanh(nc.matmul(masked_mean(ann), self.W_init.value))
        return DecoderState(s0, np.full(ann.h.shape[0], BOS, dtype=np.int64), 0)

    def cgru_step(self, state: DecoderState, ann: Annotations, key_proj=None,
                  visual: VisualContext | None = None, rng=None) -> StepOutput:
        y_emb = self.embed(state.y_prev)
        s_t = self.rec1(nc.dropout(y_emb, self.keep_in, rng), state.s_hat)
        V_t = None
        keys, mask = ann.h, ann.mask
        if visual is not None:
            V_t = visual.read(s_t)
            if visual.remodulate:
                keys = modulate_annotations(ann, V_t, visual.W_pool).h
                key_proj = None
        c_t, _ = self.att(keys, mask, s_t, key_proj)
        s_hat = self.rec2(c_t, s_t)
        return StepOutput(DecoderState(s_hat, state.y_prev, state.step + 1), c_t, s_t, V_t, y_emb)

    def output_logits(self, y_prev_emb, s_hat, c_t, V_t=None, rng=None) -> nc.Tensor:
        pre = y_prev_emb + nc.matmul(s_hat, self.W_shat.value) + nc.matmul(c_t, self.W_c.value)
        if V_t is not None:
            if self.W_v is None:
                raise ShapeError("decoder was built without a visual output projection")
            pre = pre + nc.matmul(V_t, self.W_v.value)
        o = nc.dropout(nc.tanh(pre), self.keep_softmax, rng)
        return nc.linear(o, self.W_o.value, self.b_o.value)

    def step_logits(self, state, ann, key_proj=None, visual=None, rng=None):
        out = self.cgru_step(state, ann, key_proj, visual, rng)
        s_hat = nc.dropout(out.state.s_hat, self.keep_out, rng)
        V_t = None if (visual is not None and visual.remodulate) else out.V_t
        return out.state, self.output_logits(out.y_emb, s_hat, out.c_t, V_t, rng)

    # ------------------------------------------------------------------ sequences

    def teacher_forced_logits(self, ann: Annotations, tgt_in: np.ndarray,
                              visual: VisualContext | None = None, rng=None) -> nc.Tensor:
        """Logits ``[B, K, V]`` for every position given gold previous tokens ``tgt_in[B, K]``."""
        tgt_in = np.asarray(tgt_in, dtype=np.int64)
        key_proj = self.att.project_keys(ann.h)
        state = self.init_state(ann)
        logits = []
        for t in range(tgt_in.shape[1]):
            state.y_prev = tgt_in[:, t]
            state, lg = self.step_logits(state, ann, key_proj, visual, rng)
            logits.append(lg)
        return nc.stack(logits, axis=1)

    def greedy(self, ann: Annotations, max_len: int, visual=None) -> list[list[int]]:
        """Argmax decoding for a whole batch; returned token lists exclude the end symbol."""
        if max_len <= 0:
            raise ParameterError("max_len must be positive")
        with nc.no_grad():
            key_proj = self.att.project_keys(ann.h)
            state = self.init_state(ann)
            B = ann.h.shape[0]
            out = [[] for _ in range(B)]
            done = np.zeros(B, dtype=bool)
            for _ in range(max_len):
                state, lg = self.step_logits(state, ann, key_proj, visual)
                scores = nc.log_softmax_np(lg.data.astype(np.float64))
                scores[:, [PAD, BOS, UNK]] = -np.inf
                nxt = scores.argmax(axis=1)
                for b in np.flatnonzero(~done):
                    if nxt[b] == EOS:
                        done[b] = True
                    else:
                        out[b].append(int(nxt[b]))
                if done.all():
                    break
                state.y_prev = nxt
        return out

    def beam_search(self, ann: Annotations, beam: int, max_len: int, visual=None,
                    length_penalty: float = 0.0) -> Hypothesis:
        """Length-bounded beam search for one sentence (``ann`` has batch size 1).

        ``max_len`` bounds the emitted tokens including the end symbol; hypotheses
        that reach it without ending are returned unfinished. Pad/start/unknown are
        never emitted. Ties go to the lower token sequence, then the earlier finish.
        """
        if beam < 1:
            raise ParameterError("beam must be >= 1")
        if max_len <= 0:
            raise ParameterError("max_len must be positive")
        if ann.h.shape[0] != 1:
            raise ShapeError("beam_search decodes one sentence at a time")

        def rank(h: Hypothesis) -> float:
            if length_penalty == 0.0:
                return h.log_prob
            return h.log_prob / (((5.0 + len(h.tokens)) / 6.0) ** length_penalty)

        with nc.no_grad():
            state0 = self.init_state(ann)
            live = [Hypothesis([], 0.0, DecoderState(state0.s_hat, state0.y_prev, 0))]
            finished: list[Hypothesis] = []
            for step in range(max_len):
                k = len(live)
                ann_k = _repeat_ann(ann, k)
                vis_k = visual.repeat(k) if visual is not None else None
                s_hat = nc.Tensor(np.concatenate([h.state.s_hat.data for h in live], axis=0))
                y_prev = np.array([h.tokens[-1] if h.tokens else BOS for h in live], dtype=np.int64)
                new_state, lg = self.step_logits(DecoderState(s_hat, y_prev, step), ann_k,
                                                 self.att.project_keys(ann_k.h), vis_k)
                logp = nc.log_softmax_np(lg.data.astype(np.float64))
                logp[:, [PAD, BOS, UNK]] = -np.inf
                cands = []
                for i, h in enumerate(live):
                    for tok in np.flatnonzero(np.isfinite(logp[i])):
                        cands.append((h.log_prob + logp[i, tok], h.tokens + [int(tok)], i))
                cands.sort(key=lambda c: (-c[0], c[1]))
                live = []
                for score, tokens, i in cands[:beam]:
                    st = DecoderState(nc.Tensor(new_state.s_hat.data[i:i + 1]), None, step + 1)
                    hyp = Hypothesis(tokens, float(score), st, tokens[-1] == EOS, step + 1)
                    (finished if hyp.finished else live).append(hyp)
                if not live:
                    break
                if length_penalty == 0.0 and finished:
                    # log-probs only fall as tokens are added, so no live prefix can overtake
                    if max(h.log_prob for h in finished) >= max(h.log_prob for h in live):
                        break
            pool = finished + live
            pool.sort(key=lambda h: (-rank(h), h.tokens, h.steps_to_finish))
            return pool[0]

    def sequence_log_prob(self, ann: Annotations, tokens, visual=None) -> float:
        """Exact ``sum_t log p(y_t | y_<t)`` of one token sequence (batch size 1)."""
        tokens = [int(t) for t in tokens]
        with nc.no_grad():
            lg = self.teacher_forced_logits(ann, np.array([[BOS] + tokens[:-1]]), visual)
        logp = nc.log_softmax_np(lg.data[0].astype(np.float64))
        return float(sum(logp[t, tok] for t, tok in enumerate(tokens)))
