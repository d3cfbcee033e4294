"""Mini-ResNet image encoder with (conditional) batch normalisation.

Layout is NHWC throughout. A network is a stem convolution followed by four
stages of residual blocks. Every normalisation layer inside a stage listed in
``cbn_stages`` gets its own delta predictor, a one-hidden-layer MLP that reads
the pooled text conditioning and shifts that layer's scale and shift per example.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .config import ModelConfig
from .errors import (
    DegenerateBatchError,
    KindError,
    MissingConditioningError,
    PairingError,
    ShapeError,
)


@dataclass
class FeatureStack:
    kind: str
    pooled: nc.Tensor | None = None   # [B, d_pool]
    grid: nc.Tensor | None = None     # [B, L, d_loc]

    def __post_init__(self):
        if self.kind == "pool5":
            ok = self.pooled is not None and self.grid is None
        elif self.kind == "conv":
            ok = self.grid is not None and self.pooled is None
        else:
            raise KindError(f"unknown feature kind {self.kind!r}")
        if not ok:
            raise KindError(f"{self.kind} feature stack must populate exactly its own field")


class BatchNorm:
    """Per-channel normalisation with frozen-by-default scale/shift and running statistics."""

    def __init__(self, store: nc.ParamStore, name: str, channels: int, decay: float = 0.99,
                 eps: float = 1e-5, trainable: bool = False):
        self.name = name
        self.gamma = store.add(f"{name}.gamma", np.ones(channels), trainable)
        self.beta = store.add(f"{name}.beta", np.zeros(channels), trainable)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.decay, self.eps = decay, eps

    def normalize(self, x: nc.Tensor, train: bool) -> nc.Tensor:
        if train:
            B, H, W, _ = x.shape
            if B * H * W < 2:
                raise DegenerateBatchError(f"{self.name}: batch statistics need at least two values")
            xhat, mu, var = nc.batch_normalize(x, self.eps)
            self.running_mean = self.decay * self.running_mean + (1 - self.decay) * mu
            self.running_var = self.decay * self.running_var + (1 - self.decay) * var
            return xhat
        dtype = x.data.dtype
        shift = nc.Tensor(-self.running_mean.astype(dtype))
        scale = nc.Tensor((1.0 / np.sqrt(self.running_var + self.eps)).astype(dtype))
        return nc.mul(nc.add(x, shift), scale)

    def __call__(self, x: nc.Tensor, train: bool, delta=None) -> nc.Tensor:
        xhat = self.normalize(x, train)
        gamma, beta = self.gamma.value, self.beta.value
        if delta is not None:
            d_gamma, d_beta = delta
            B, C = d_gamma.shape
            if B != x.shape[0]:
                raise PairingError(f"{B} conditioning rows for a batch of {x.shape[0]} images")
            gamma = nc.reshape(nc.add(d_gamma, gamma), (B, 1, 1, C))
            beta = nc.reshape(nc.add(d_beta, beta), (B, 1, 1, C))
        return nc.add(nc.mul(xhat, gamma), beta)

    def state(self) -> dict:
        return {"running_mean": self.running_mean, "running_var": self.running_var}


class CBNPredictor:
    """MLP(q) -> (delta_gamma, delta_beta); the output layer starts at exactly zero."""

    def __init__(self, store: nc.ParamStore, name: str, d_q: int, hidden: int, channels: int, rng):
        self.channels = channels
        self.W1 = store.add(f"{name}.W1", rng.normal(0.0, np.sqrt(2.0 / d_q), (d_q, hidden)))
        self.b1 = store.add(f"{name}.b1", np.zeros(hidden))
        self.W2 = store.add(f"{name}.W2", np.zeros((hidden, 2 * channels)))
        self.b2 = store.add(f"{name}.b2", np.zeros(2 * channels))

    def __call__(self, q: nc.Tensor):
        hid = nc.relu(nc.linear(q, self.W1.value, self.b1.value))
        out = nc.linear(hid, self.W2.value, self.b2.value)
        C = self.channels
        return out[:, :C], out[:, C:]


class Norm:
    """A batch-norm layer, optionally conditioned through its own predictor."""

    def __init__(self, store, name, channels, cfg: ModelConfig, conditioned: bool, rng):
        self.bn = BatchNorm(store, name, channels, cfg.cbn_decay, cfg.cbn_damping_factor)
        self.predictor = (CBNPredictor(store, f"{name}.cbn", cfg.conditioning_size,
                                       cfg.cbn_mlp_hidden_units, channels, rng)
                          if conditioned else None)

    def __call__(self, x, train: bool, q=None):
        delta = self.predictor(q) if (self.predictor is not None and q is not None) else None
        return self.bn(x, train, delta)


def batch_norm(x: nc.Tensor, state: BatchNorm, train: bool = True) -> nc.Tensor:
    return state(x, train)


def conditional_batch_norm(x: nc.Tensor, state: BatchNorm, q: nc.Tensor, predictor: CBNPredictor,
                           train: bool = True) -> nc.Tensor:
    if q.shape[0] != x.shape[0]:
        raise PairingError(f"{q.shape[0]} conditioning vectors for {x.shape[0]} images")
    return state(x, train, predictor(q))


def _conv_kernel(rng, k: int, cin: int, cout: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / (k * k * cin)), (k, k, cin, cout))


class ResidualBlock:
    def __init__(self, store, name, cin, cout, stride, cfg: ModelConfig, conditioned: bool, rng,
                 projection: bool = True):
        self.name, self.variant, self.stride = name, cfg.resnet_version, stride
        self.identity = cin == cout and stride == 1
        if not self.identity and not projection:
            raise ShapeError(f"{name}: {cin}->{cout} stride {stride} needs a projection shortcut")
        self.conv1 = store.add(f"{name}.conv1", _conv_kernel(rng, 3, cin, cout), False)
        self.conv2 = store.add(f"{name}.conv2", _conv_kernel(rng, 3, cout, cout), False)
        first = cin if self.variant == "v2" else cout
        self.norm1 = Norm(store, f"{name}.norm1", first, cfg, conditioned, rng)
        self.norm2 = Norm(store, f"{name}.norm2", cout, cfg, conditioned, rng)
        self.proj = None
        if not self.identity:
            self.proj = store.add(f"{name}.proj", _conv_kernel(rng, 1, cin, cout), False)
            if self.variant == "v1":
                self.proj_norm = Norm(store, f"{name}.proj_norm", cout, cfg, conditioned, rng)

    def conv_params(self) -> list:
        return [p for p in (self.conv1, self.conv2, self.proj) if p is not None]

    def __call__(self, x, train: bool, q=None):
        if self.variant == "v1":
            y = nc.relu(self.norm1(nc.conv2d(x, self.conv1.value, self.stride), train, q))
            y = self.norm2(nc.conv2d(y, self.conv2.value, 1), train, q)
            if self.identity:
                short = x
            else:
                short = self.proj_norm(nc.conv2d(x, self.proj.value, self.stride), train, q)
            return nc.relu(nc.add(y, short))
        pre = nc.relu(self.norm1(x, train, q))
        y = nc.conv2d(pre, self.conv1.value, self.stride)
        y = nc.conv2d(nc.relu(self.norm2(y, train, q)), self.conv2.value, 1)
        short = x if self.identity else nc.conv2d(pre, self.proj.value, self.stride)
        return nc.add(y, short)


def residual_block(x, block: ResidualBlock, train: bool = True, q=None):
    return block(x, train, q)


def feature_shapes(cfg: ModelConfig) -> dict:
    """Spatial/channel shapes of every stage, by stride arithmetic alone."""
    H, W, _ = cfg.resnet_input_size
    H = nc.conv_output_size(H, cfg.stem_kernel, cfg.stem_stride, "same")
    W = nc.conv_output_size(W, cfg.stem_kernel, cfg.stem_stride, "same")
    if cfg.stem_pool:
        H, W = nc.conv_output_size(H, 3, 2, "same"), nc.conv_output_size(W, 3, 2, "same")
    stages = []
    for stride, ch in zip(cfg.stage_strides, cfg.stage_channels):
        H, W = nc.conv_output_size(H, 3, stride, "same"), nc.conv_output_size(W, 3, stride, "same")
        stages.append((H, W, ch))
    eh, ew, ec = stages[cfg.conv_extraction_stage - 1]
    return {"stages": stages, "pool5": cfg.stage_channels[-1], "grid": (eh * ew, ec)}


class ResNet:
    def __init__(self, store: nc.ParamStore, cfg: ModelConfig, rng):
        self.cfg = cfg
        self.cbn_stages = set(cfg.cbn_stages)
        stem_ch = cfg.stem_channels or cfg.stage_channels[0]
        self.stem = store.add("resnet.stem.conv", _conv_kernel(rng, cfg.stem_kernel, 3, stem_ch), False)
        self.stem_norm = (Norm(store, "resnet.stem.norm", stem_ch, cfg, False, rng)
                          if cfg.resnet_version == "v1" else None)
        self.stages: list[list[ResidualBlock]] = []
        cin = stem_ch
        for s, (cout, n_blocks, stride) in enumerate(
                zip(cfg.stage_channels, cfg.blocks_per_stage, cfg.stage_strides), start=1):
            blocks = []
            for b in range(n_blocks):
                blocks.append(ResidualBlock(store, f"resnet.stage{s}.block{b + 1}", cin, cout,
                                            stride if b == 0 else 1, cfg, s in self.cbn_stages, rng))
                cin = cout
            self.stages.append(blocks)
        self.post_norm = (Norm(store, "resnet.post_norm", cin, cfg, False, rng)
                          if cfg.resnet_version == "v2" else None)
        self.set_trainability(cfg.finetune_last_stage)

    def norms(self) -> list[Norm]:
        out = [n for n in (self.stem_norm, self.post_norm) if n is not None]
        for blocks in self.stages:
            for blk in blocks:
                out += [blk.norm1, blk.norm2] + ([blk.proj_norm] if hasattr(blk, "proj_norm") else [])
        return out

    def frozen_params(self) -> list[nc.Parameter]:
        params = [self.stem]
        for blocks in self.stages:
            for blk in blocks:
                params += blk.conv_params()
        for n in self.norms():
            params += [n.bn.gamma, n.bn.beta]
        return params

    def set_trainability(self, finetune_last_stage: bool) -> None:
        """Freeze every ResNet weight; optionally unfreeze the last stage's convolutions."""
        for p in self.frozen_params():
            p.trainable = False
        if finetune_last_stage:
            for blk in self.stages[-1]:
                for p in blk.conv_params():
                    p.trainable = True
        for n in self.norms():
            if n.predictor is not None:
                for p in (n.predictor.W1, n.predictor.b1, n.predictor.W2, n.predictor.b2):
                    p.trainable = True

    def forward_features(self, images, q=None, kind: str = "pool5", train: bool = True) -> FeatureStack:
        cfg = self.cfg
        x = images if isinstance(images, nc.Tensor) else nc.Tensor(np.asarray(images, nc.get_dtype()))
        if x.ndim != 4 or tuple(x.shape[1:]) != tuple(cfg.resnet_input_size):
            raise ShapeError(f"images {x.shape} do not match input size {cfg.resnet_input_size}")
        if self.cbn_stages and q is None:
            raise MissingConditioningError("conditional batch norm is enabled but no q was given")
        if q is not None and q.shape[0] != x.shape[0]:
            raise PairingError(f"{q.shape[0]} conditioning vectors for {x.shape[0]} images")
        if kind not in ("pool5", "conv"):
            raise KindError(f"unknown feature kind {kind!r}")

        x = nc.conv2d(x, self.stem.value, cfg.stem_stride)
        if self.stem_norm is not None:
            x = nc.relu(self.stem_norm(x, train))
        if cfg.stem_pool:
            x = nc.max_pool2d(x, 3, 2)
        last = 4 if kind == "pool5" else cfg.conv_extraction_stage
        for s, blocks in enumerate(self.stages[:last], start=1):
            stage_q = q if s in self.cbn_stages else None
            for blk in blocks:
                x = blk(x, train, stage_q)
        if kind == "conv":
            B, H, W, C = x.shape
            return FeatureStack("conv", grid=nc.reshape(x, (B, H * W, C)))
        if self.post_norm is not None:
            x = nc.relu(self.post_norm(x, train))
        return FeatureStack("pool5", pooled=nc.global_max_pool(x))


def set_trainability(resnet: ResNet, cfg: ModelConfig) -> None:
    resnet.set_trainability(cfg.finetune_last_stage)
