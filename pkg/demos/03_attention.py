"""Additive attention: weights, masking, and order independence.

Scores are v . tanh(W_k k_i + W_q q). Masked keys get weight exactly zero, the
weights sum to one, and permuting keys permutes the weights bit for bit.
Run:  python3 demos/03_attention.py
"""
import numpy as np

from mmtcbn import numcore as nc
from mmtcbn.attention import Attention

rng = np.random.default_rng(1)
att = Attention(nc.ParamStore(), "demo", d_key=4, d_query=3, d_att=5, rng=rng)
keys = rng.normal(size=(1, 6, 4)).astype(np.float32)
query = nc.Tensor(rng.normal(size=(1, 3)).astype(np.float32))
mask = np.array([[1, 1, 1, 1, 0, 0]], dtype=float)  # the last two keys are padding

context, w = att(nc.Tensor(keys), mask, query)
print("weights:", np.round(w.data[0], 4), " sum:", w.data.sum())
print("context lies between the smallest and largest unmasked key in every dimension:",
      bool(np.all(context.data[0] >= keys[0, :4].min(0)) and np.all(context.data[0] <= keys[0, :4].max(0))))

perm = np.array([3, 0, 5, 1, 4, 2])
_, wp = att(nc.Tensor(keys[:, perm]), mask[:, perm], query)
print("permuting keys permutes weights exactly:", np.array_equal(w.data[:, perm], wp.data))

# The literal ratio normaliser divides raw scores by their sum; scores are
# signed, so it can produce negative or very large weights.
ratio = Attention(nc.ParamStore(), "ratio", 4, 3, 5, np.random.default_rng(1), normalizer="ratio")
_, wr = ratio(nc.Tensor(keys), mask, query)
print("ratio weights:", np.round(wr.data[0], 3))
