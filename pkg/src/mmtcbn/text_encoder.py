"""Source-side encoder: embeddings, layer-normalised bidirectional GRU, conditioning pool."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import EmptySupportError, ShapeError


@dataclass
class Annotations:
    """Per-token source states ``h[B, M, D]`` with a 0/1 ``mask[B, M]``."""

    h: nc.Tensor
    mask: np.ndarray

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1).astype(np.int64)

    @property
    def dim(self) -> int:
        return self.h.shape[-1]


def init_matrix(rng, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def masked_mean(ann: Annotations) -> nc.Tensor:
    """Mean of the annotations over real (unmasked) tokens only."""
    counts = ann.mask.sum(axis=1)
    if (counts == 0).any():
        raise EmptySupportError("annotation sequence has no unmasked positions")
    total = nc.sum(ann.h, axis=1)
    return nc.mul(total, nc.Tensor((1.0 / counts)[:, None].astype(ann.h.data.dtype)))


class Embedding:
    def __init__(self, store: nc.ParamStore, name: str, vocab_size: int, dim: int, rng):
        self.table = store.add(f"{name}.E", rng.normal(0.0, 0.1, size=(vocab_size, dim)))

    @property
    def vocab_size(self) -> int:
        return self.table.shape[0]

    def __call__(self, ids) -> nc.Tensor:
        return nc.embedding(self.table.value, ids)


class GRUCell:
    """Gated recurrent unit with the update/reset/candidate parametrisation.

    With ``layer_norm`` each gate's combined pre-activation is layer-normalised
    and the norm's bias replaces the gate bias.
    """

    def __init__(self, store: nc.ParamStore, name: str, d_in: int, d_hid: int, rng,
                 layer_norm: bool = False, eps: float = 1e-5):
        self.name, self.d_in, self.d_hid = name, d_in, d_hid
        self.layer_norm, self.eps = layer_norm, eps
        p = {}
        for gate in ("z", "r", ""):
            suffix = f"_{gate}" if gate else ""
            p[f"W{suffix}"] = store.add(f"{name}.W{suffix}", init_matrix(rng, d_in, d_hid))
            p[f"U{suffix}"] = store.add(f"{name}.U{suffix}", init_matrix(rng, d_hid, d_hid))
            if layer_norm:
                p[f"g{suffix}"] = store.add(f"{name}.ln{suffix or '_h'}.gain", np.ones(d_hid))
                p[f"b{suffix}"] = store.add(f"{name}.ln{suffix or '_h'}.bias", np.zeros(d_hid))
            else:
                p[f"b{suffix}"] = store.add(f"{name}.b{suffix}", np.zeros(d_hid))
        self.p = p

    def _pre(self, value: nc.Tensor, suffix: str) -> nc.Tensor:
        if self.layer_norm:
            return nc.layer_norm(value, self.p[f"g{suffix}"].value, self.p[f"b{suffix}"].value, self.eps)
        return nc.add(value, self.p[f"b{suffix}"].value)

    def step(self, x: nc.Tensor, s_prev: nc.Tensor) -> nc.Tensor:
        if x.shape[-1] != self.d_in or s_prev.shape[-1] != self.d_hid:
            raise ShapeError(f"{self.name}: got input {x.shape} and state {s_prev.shape}")
        p = self.p
        z = nc.sigmoid(self._pre(nc.matmul(x, p["W_z"].value) + nc.matmul(s_prev, p["U_z"].value), "_z"))
        r = nc.sigmoid(self._pre(nc.matmul(x, p["W_r"].value) + nc.matmul(s_prev, p["U_r"].value), "_r"))
        cand = nc.tanh(self._pre(nc.matmul(x, p["W"].value) + r * nc.matmul(s_prev, p["U"].value), ""))
        return (1.0 - z) * cand + z * s_prev

    __call__ = step


def gru_step(x_t: nc.Tensor, s_prev: nc.Tensor, cell: GRUCell) -> nc.Tensor:
    return cell.step(x_t, s_prev)


def _check_right_padded(mask: np.ndarray) -> None:
    if mask.shape[1] > 1 and (np.diff(mask, axis=1) > 0).any():
        raise ShapeError("source mask must be right-padded (ones followed by zeros)")


class TextEncoder:
    def __init__(self, store: nc.ParamStore, vocab_size: int, d_emb: int, d_gru: int, d_q: int, rng,
                 layer_norm: bool = True, ln_eps: float = 1e-5, keep_in: float = 1.0,
                 keep_out: float = 1.0, stop_gradient_q: bool = False):
        self.embed = Embedding(store, "encoder.embed", vocab_size, d_emb, rng)
        self.fwd = GRUCell(store, "encoder.fwd", d_emb, d_gru, rng, layer_norm, ln_eps)
        self.bwd = GRUCell(store, "encoder.bwd", d_emb, d_gru, rng, layer_norm, ln_eps)
        self.W_q = store.add("encoder.W_q", init_matrix(rng, 2 * d_gru, d_q))
        self.d_gru = d_gru
        self.keep_in, self.keep_out = keep_in, keep_out
        self.stop_gradient_q = stop_gradient_q

    def encode(self, ids, mask=None, rng=None) -> Annotations:
        """Run both directions over right-padded ``ids[B, M]`` (a 1-D sequence is a batch of one).

        ``rng`` enables dropout; ``None`` keeps everything.
        """
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        if mask is None:
            mask = np.ones(ids.shape)
        mask = np.asarray(mask, dtype=np.float64)
        if mask.ndim == 1:
            mask = mask[None]
        if mask.shape != ids.shape:
            raise ShapeError(f"mask {mask.shape} does not match ids {ids.shape}")
        if ids.shape[1] == 0 or (mask.sum(axis=1) == 0).any():
            raise EmptySupportError("cannot encode an empty source sentence")
        _check_right_padded(mask)
        dtype = nc.get_dtype()
        B, M = ids.shape
        emb = nc.dropout(self.embed(ids), self.keep_in, rng)
        xs = [emb[:, t, :] for t in range(M)]
        zero = nc.Tensor(np.zeros((B, self.d_gru), dtype=dtype))

        s, fwd = zero, []
        for t in range(M):
            s = self.fwd(xs[t], s)
            fwd.append(s)

        s, bwd = zero, [None] * M
        for t in reversed(range(M)):
            s = self.bwd(xs[t], s)
            col = mask[:, t]
            if not col.all():
                # padding sits after the sentence, so the backward state stays zero through it
                s = s * nc.Tensor(col[:, None].astype(dtype))
            bwd[t] = s

        h = nc.concat([nc.stack(fwd, axis=1), nc.stack(bwd, axis=1)], axis=-1)
        if not mask.all():
            h = h * nc.Tensor(mask[:, :, None].astype(dtype))
        h = nc.dropout(h, self.keep_out, rng)
        return Annotations(h, mask)

    def pool_conditioning(self, ann: Annotations) -> nc.Tensor:
        """``tanh(W_q . mean_i h_i)`` with the mean over real tokens; one row per sentence."""
        if self.stop_gradient_q:
            ann = Annotations(nc.Tensor(ann.h.data), ann.mask)
        return nc.tanh(nc.matmul(masked_mean(ann), self.W_q.value))
