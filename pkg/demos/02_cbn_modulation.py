"""Conditional batch normalisation: text decides how an image is normalised.

A predictor maps a conditioning vector q to per-channel offsets for the BN
scale and shift. Its output layer starts at zero, so a fresh CBN layer is
exactly plain BN. Once the predictor has weights, two captions applied to the
same image give different feature maps.  Run:  python3 demos/02_cbn_modulation.py
"""
import numpy as np

from mmtcbn import numcore as nc
from mmtcbn.vision import BatchNorm, CBNPredictor, batch_norm, conditional_batch_norm

rng = np.random.default_rng(0)
store = nc.ParamStore()
bn = BatchNorm(store, "bn", channels=4)
pred = CBNPredictor(store, "cbn", d_q=6, hidden=8, channels=4, rng=rng)

images = nc.Tensor(rng.normal(size=(2, 5, 5, 4)).astype(np.float32))
q = nc.Tensor(rng.normal(size=(2, 6)).astype(np.float32))

plain = batch_norm(images, bn).data
cond = conditional_batch_norm(images, bn, q, pred).data
print("zero-initialised predictor gives plain BN bit for bit:", plain.tobytes() == cond.tobytes())

# Pretend training moved the output layer; now the same image under two
# different conditioning vectors is normalised differently.
pred.W2.value.data = rng.normal(0, 0.5, pred.W2.shape).astype(np.float32)
same_image = nc.Tensor(np.repeat(images.data[:1], 2, axis=0))
out = conditional_batch_norm(same_image, bn, q, pred).data
print("per-channel means for caption A:", np.round(out[0].mean(axis=(0, 1)), 3))
print("per-channel means for caption B:", np.round(out[1].mean(axis=(0, 1)), 3))
