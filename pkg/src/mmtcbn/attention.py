"""Additive (Bahdanau-style) attention and the visual fusion operators built on it."""
from __future__ import annotations

import numpy as np

from . import numcore as nc
from .errors import KindError, PairingError, ShapeError
from .text_encoder import Annotations, init_matrix
from .vision import FeatureStack


class Attention:
    """Scores ``v_a . tanh(W_key k_i + W_query q)`` and returns the weighted key average.

    ``calls`` counts invocations so callers can check how many attention reads a
    decoder step performs.
    """

    def __init__(self, store: nc.ParamStore, name: str, d_key: int, d_query: int, d_att: int, rng,
                 normalizer: str = "softmax"):
        self.name = name
        self.W_key = store.add(f"{name}.W_key", init_matrix(rng, d_key, d_att))
        self.W_query = store.add(f"{name}.W_query", init_matrix(rng, d_query, d_att))
        self.v_a = store.add(f"{name}.v_a", rng.uniform(-0.1, 0.1, (d_att, 1)))
        self.normalizer = normalizer
        self.calls = 0

    @property
    def d_key(self) -> int:
        return self.W_key.shape[0]

    def project_keys(self, keys: nc.Tensor) -> nc.Tensor:
        if keys.shape[-1] != self.d_key:
            raise ShapeError(f"{self.name}: keys have dim {keys.shape[-1]}, expected {self.d_key}")
        return nc.rowwise_matmul(keys, self.W_key.value)

    def __call__(self, keys: nc.Tensor, mask, query: nc.Tensor, key_proj: nc.Tensor | None = None):
        """``keys[B, N, dk]`` with ``query[B, dq]`` or ``query[B, Q, dq]`` (one read per query)."""
        self.calls += 1
        B, N, _ = keys.shape
        kp = self.project_keys(keys) if key_proj is None else key_proj
        qp = nc.matmul(query, self.W_query.value)
        many = query.ndim == 3
        if many:
            Q = query.shape[1]
            e = nc.tanh(nc.add(nc.reshape(kp, (B, 1, N, -1)), nc.reshape(qp, (B, Q, 1, -1))))
        else:
            e = nc.tanh(nc.add(kp, nc.reshape(qp, (B, 1, -1))))
        # per-key reductions, so permuting keys permutes scores bit for bit
        scores = nc.sum(nc.mul(e, nc.reshape(self.v_a.value, (-1,))), axis=-1)
        if mask is None:
            mask = np.ones(scores.shape)
        else:
            mask = np.asarray(mask)
            if many and mask.ndim == 2:
                mask = np.broadcast_to(mask[:, None, :], scores.shape)
        if self.normalizer == "ratio":
            weights = nc.ratio_normalize(scores, mask)
        else:
            weights = nc.softmax_masked(scores, mask)
        if many:
            context = nc.matmul(weights, keys)
        else:
            context = nc.reshape(nc.matmul(nc.reshape(weights, (B, 1, N)), keys), (B, -1))
        return context, weights


def attend(keys, mask, query, params: Attention):
    """Single-instance form: ``keys[N, dk]``, ``query[dq]`` -> (``context[dk]``, ``weights[N]``)."""
    keys, query = nc._as_tensor(keys), nc._as_tensor(query)
    if keys.ndim == 2:
        m = None if mask is None else np.asarray(mask)[None]
        ctx, w = params(nc.reshape(keys, (1,) + keys.shape), m, nc.reshape(query, (1, -1)))
        return nc.reshape(ctx, (-1,)), nc.reshape(w, (-1,))
    return params(keys, mask, query)


def _require_grid(features: FeatureStack) -> nc.Tensor:
    if not isinstance(features, FeatureStack) or features.kind != "conv":
        raise KindError("visual attention needs a conv feature stack")
    return features.grid


def visual_attend_decoder(features: FeatureStack, s_t: nc.Tensor, params: Attention,
                          key_proj: nc.Tensor | None = None) -> nc.Tensor:
    """Weighted sum of the spatial annotations, queried by the decoder proposal state."""
    grid = _require_grid(features)
    context, _ = params(grid, None, s_t, key_proj)
    return context


def _weight(W) -> nc.Tensor:
    return W.value if isinstance(W, nc.Parameter) else nc._as_tensor(W)


def _gate(V: nc.Tensor, W_pool) -> nc.Tensor:
    W = _weight(W_pool)
    if V.shape[-1] != W.shape[0]:
        raise ShapeError(f"visual vector dim {V.shape[-1]} does not match W_pool {W.shape}")
    return nc.tanh(nc.matmul(V, W))


def modulate_annotations(ann: Annotations, V: nc.Tensor, W_pool) -> Annotations:
    """``h_i * tanh(W_pool V)`` for every position of each sentence; padding stays zero."""
    gate = _gate(V, W_pool)
    if gate.shape[-1] != ann.dim:
        raise ShapeError(f"W_pool maps to {gate.shape[-1]}, annotations have dim {ann.dim}")
    B = ann.h.shape[0]
    return Annotations(nc.mul(ann.h, nc.reshape(gate, (B, 1, ann.dim))), ann.mask)


def visual_attend_encoder(features: FeatureStack, ann: Annotations, params: Attention) -> nc.Tensor:
    """One visual read per source position, queried by that position's annotation: ``[B, M, d_loc]``."""
    grid = _require_grid(features)
    V, _ = params(grid, None, ann.h)
    return V


def fuse_encoder_visual(ann: Annotations, V: nc.Tensor, W_pool, fusion: str = "gate") -> Annotations:
    """Merge per-position visual vectors into the annotations.

    ``gate`` reuses the pool5 gating per position; ``concat`` projects ``[h_i; V_i]``
    back to the annotation size (``W_pool`` then maps ``D + d_loc -> D``).
    """
    if V.shape[:2] != ann.h.shape[:2]:
        raise PairingError(f"{V.shape[:2]} visual vectors for annotations {ann.h.shape[:2]}")
    dtype = ann.h.data.dtype
    mask = nc.Tensor(ann.mask[:, :, None].astype(dtype))
    if fusion == "gate":
        gate = _gate(V, W_pool)
        if gate.shape[-1] != ann.dim:
            raise ShapeError(f"W_pool maps to {gate.shape[-1]}, annotations have dim {ann.dim}")
        h = nc.mul(ann.h, gate)
    elif fusion == "concat":
        h = nc.tanh(nc.matmul(nc.concat([ann.h, V], axis=-1), _weight(W_pool)))
    else:
        raise KindError(f"unknown fusion {fusion!r}")
    return Annotations(nc.mul(h, mask), ann.mask)
