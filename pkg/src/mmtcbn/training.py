"""Loss, Adam, the training loop with early stopping, checkpoints and the variant grid."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numcore as nc
from .bleu import bleu
from .config import ModelConfig, variant_config
from .data import (
    Example,
    JitterRanges,
    SynthCorpus,
    TextPipeline,
    collate,
    detokenize,
    make_batches,
    preprocess_image,
    synth_images,
    tokenize,
)
from .errors import CompatibilityError, DivergenceError, ParameterError
from .model import MMTModel

log = logging.getLogger(__name__)

METRICS_HEADER = ("step", "train_loss", "dev_loss", "dev_bleu")


def nll_loss(logits: nc.Tensor, tgt_ids, tgt_mask) -> nc.Tensor:
    """Mean of ``-log softmax(logits)[y]`` over unmasked target positions."""
    return nc.cross_entropy(logits, tgt_ids, tgt_mask)


# ---------------------------------------------------------------------- optimiser


class Adam:
    def __init__(self, params: Sequence[nc.Parameter], lr=0.0004, beta1=0.9, beta2=0.999, eps=8e-7):
        if not lr >= 0 or not eps > 0:
            raise ParameterError("Adam needs lr >= 0 and eps > 0")
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0

    @classmethod
    def from_config(cls, params, cfg: ModelConfig) -> "Adam":
        return cls(params, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.optimizer_epsilon)

    def step(self) -> None:
        self.t += 1
        adam_step(self.params, self, self.t)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def adam_step(params: Sequence[nc.Parameter], opt, t: int) -> None:
    """One bias-corrected Adam update from each parameter's accumulated ``grad``."""
    if t < 1:
        raise ParameterError("Adam step counter starts at 1")
    b1, b2 = opt.beta1, opt.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for p in params:
        if not p.trainable:
            continue
        g = p.grad
        p.adam_m = b1 * p.adam_m + (1 - b1) * g
        p.adam_v = b2 * p.adam_v + (1 - b2) * g * g
        update = opt.lr * (p.adam_m / c1) / (np.sqrt(p.adam_v / c2) + opt.eps)
        p.value.data = (p.data - update).astype(p.data.dtype)


# ---------------------------------------------------------------------- vision pretraining


def pretrain_vision(model: MMTModel, seed: int = 0, steps: int | None = None) -> list[float]:
    """Fit the image network on shape/colour classification, then freeze it again.

    A linear head on the pooled features is trained jointly with every ResNet
    convolution and BN scale/shift; the head is discarded afterwards. CBN
    predictors are left untouched (their zero output layer keeps them inert).
    Returns the per-step classification losses.
    """
    cfg, resnet = model.cfg, model.resnet
    steps = cfg.pretrain_steps if steps is None else steps
    if resnet is None or steps == 0:
        return []
    rng = np.random.default_rng([seed, 7])
    H = cfg.resnet_input_size[0]
    images, labels = synth_images(cfg.pretrain_images, int(rng.integers(2 ** 31)), H)
    images = np.stack([preprocess_image(im) for im in images]).astype(nc.get_dtype())
    n_classes = int(labels.max()) + 1
    d_pool = cfg.stage_channels[-1]
    head_W = nc.Parameter("pretrain.W", rng.normal(0.0, d_pool ** -0.5, (d_pool, n_classes)))
    head_b = nc.Parameter("pretrain.b", np.zeros(n_classes))
    params = resnet.frozen_params() + [head_W, head_b]
    for p in params:
        p.trainable = True
    opt = Adam(params, cfg.pretrain_learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.optimizer_epsilon)
    q = nc.Tensor(np.zeros((cfg.batch_size, cfg.conditioning_size))) if resnet.cbn_stages else None
    losses = []
    try:
        for _ in range(steps):
            idx = rng.choice(len(images), cfg.batch_size, replace=False)
            feats = resnet.forward_features(images[idx], q, "pool5", train=True)
            loss = nc.cross_entropy(nc.linear(feats.pooled, head_W.value, head_b.value), labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
    finally:
        resnet.set_trainability(cfg.finetune_last_stage)
        for p in resnet.frozen_params():
            p.adam_m = np.zeros_like(p.adam_m)
            p.adam_v = np.zeros_like(p.adam_v)
        model.store.zero_grad()
    return losses


# ---------------------------------------------------------------------- datasets


@dataclass
class Dataset:
    """Encoded examples plus what evaluation needs (references, ambiguous-slot positions)."""

    examples: list
    references: list
    slot_positions: list | None = None   # target subword index per example, or None

    def __len__(self):
        return len(self.examples)


@dataclass
class Pipelines:
    src: TextPipeline
    tgt: TextPipeline

    @classmethod
    def fit(cls, src: Sequence[str], tgt: Sequence[str], num_merges: int) -> "Pipelines":
        return cls(TextPipeline.fit(src, num_merges), TextPipeline.fit(tgt, num_merges))

    def dataset(self, src: Sequence[str], tgt: Sequence[str], images=None, slots=None) -> Dataset:
        examples, positions = [], []
        for i, (s, t) in enumerate(zip(src, tgt)):
            img = None if images is None else images[i]
            examples.append(Example(self.src.encode(s), self.tgt.encode(t), img, i))
            if slots is not None:
                positions.append(self.tgt.word_starts(t)[slots[i]])
        refs = [detokenize(tokenize(t)) for t in tgt]
        return Dataset(examples, refs, positions if slots is not None else None)

    def synth_dataset(self, corpus: SynthCorpus) -> Dataset:
        return self.dataset(corpus.src, corpus.tgt, corpus.images, corpus.slot)


# ---------------------------------------------------------------------- checkpoints


def save_checkpoint(path, model: MMTModel, step: int = 0, optimizer: Adam | None = None,
                    pipelines: Pipelines | None = None, extra: dict | None = None) -> None:
    """Write ``manifest.json`` + ``params.bin`` (raw little-endian blocks keyed by name)."""
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    entries, blob, offset = [], io.BytesIO(), 0

    def put(name, kind, arr):
        nonlocal offset
        arr = np.ascontiguousarray(arr)
        raw = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
        entries.append({"name": name, "kind": kind, "shape": list(arr.shape),
                        "dtype": arr.dtype.str.lstrip("<>|="), "offset": offset, "nbytes": len(raw)})
        blob.write(raw)
        offset += len(raw)

    for p in model.store:
        put(p.name, "value", p.data)
        if optimizer is not None:
            put(p.name, "adam_m", p.adam_m)
            put(p.name, "adam_v", p.adam_v)
    for name, bn in model.norm_layers().items():
        put(name, "running_mean", bn.running_mean)
        put(name, "running_var", bn.running_var)
    (d / "params.bin").write_bytes(blob.getvalue())
    manifest = {
        "format": 1,
        "config": model.cfg.to_text(),
        "src_vocab_size": model.src_vocab_size,
        "tgt_vocab_size": model.tgt_vocab_size,
        "step": step,
        "adam_t": optimizer.t if optimizer is not None else 0,
        "entries": entries,
    }
    manifest.update(extra or {})
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1))
    if pipelines is not None:
        pipelines.src.vocab.save(d / "src.vocab")
        pipelines.tgt.vocab.save(d / "tgt.vocab")
        pipelines.src.bpe.save(d / "src.bpe")
        pipelines.tgt.bpe.save(d / "tgt.bpe")


def load_checkpoint(path, optimizer_params: bool = True):
    """Rebuild (model, manifest, pipelines-or-None); Adam moments are restored into the parameters."""
    from .data import BPEModel, Vocabulary

    d = Path(path)
    manifest = json.loads((d / "manifest.json").read_text())
    cfg = ModelConfig.from_text(manifest["config"])
    model = MMTModel(cfg, manifest["src_vocab_size"], manifest["tgt_vocab_size"])
    raw = (d / "params.bin").read_bytes()
    norms = model.norm_layers()
    for e in manifest["entries"]:
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"]).newbyteorder("<"),
                            count=int(np.prod(e["shape"])) if e["shape"] else 1,
                            offset=e["offset"]).reshape(e["shape"]).astype(np.dtype(e["dtype"]))
        kind = e["kind"]
        if kind in ("running_mean", "running_var"):
            setattr(norms[e["name"]], kind, arr.copy())
            continue
        if e["name"] not in model.store:
            raise CompatibilityError(f"checkpoint parameter {e['name']} unknown to this model")
        p = model.store[e["name"]]
        if tuple(e["shape"]) != p.shape:
            raise CompatibilityError(f"{e['name']}: checkpoint shape {e['shape']} vs model {p.shape}")
        if kind == "value":
            p.value.data = arr.copy()
            p.zero_grad()
        elif optimizer_params:
            setattr(p, kind, arr.copy())
    pipelines = None
    if (d / "src.vocab").exists():
        pipelines = Pipelines(TextPipeline(BPEModel.load(d / "src.bpe"), Vocabulary.load(d / "src.vocab")),
                              TextPipeline(BPEModel.load(d / "tgt.bpe"), Vocabulary.load(d / "tgt.vocab")))
        if len(pipelines.src.vocab) != model.src_vocab_size or len(pipelines.tgt.vocab) != model.tgt_vocab_size:
            raise CompatibilityError("vocabulary files do not match the embedding sizes")
    return model, manifest, pipelines


def snapshot(model: MMTModel) -> dict:
    state = {p.name: p.data.copy() for p in model.store}
    for name, bn in model.norm_layers().items():
        state[f"{name}#rm"] = bn.running_mean.copy()
        state[f"{name}#rv"] = bn.running_var.copy()
    return state


def restore(model: MMTModel, state: dict) -> None:
    for p in model.store:
        p.value.data = state[p.name].copy()
    for name, bn in model.norm_layers().items():
        bn.running_mean = state[f"{name}#rm"].copy()
        bn.running_var = state[f"{name}#rv"].copy()


# ---------------------------------------------------------------------- evaluation


def prepare_images(batch, cfg: ModelConfig, rng=None):
    if batch.images is None:
        return batch
    jitter = JitterRanges(cfg.brightness_delta, cfg.contrast_range, cfg.saturation_range, cfg.hue_delta)
    size = cfg.resnet_input_size[:2]
    imgs = np.stack([preprocess_image(img, cfg.preprocessing, rng, size, jitter=jitter)
                     for img in batch.images]).astype(nc.get_dtype())
    batch.images = imgs
    return batch


def evaluate(model: MMTModel, data: Dataset, pipelines: Pipelines | None = None,
             batch_size: int = 64, decode: bool = True) -> dict:
    """Dev loss, greedy BLEU and ambiguous-slot accuracy with running statistics."""
    cfg = model.cfg
    was_training = model.training
    model.training = False
    total_nll = total_tok = 0.0
    hits = n_slots = 0
    hyps = []
    try:
        with nc.no_grad():
            for batch in make_batches(data.examples, batch_size, None, cfg.max_sentence_length):
                prepare_images(batch, cfg)
                tgt = batch.tgt_ids
                lg = model.logits(batch.src_ids, batch.src_mask, batch.images, tgt[:, :-1])
                w = batch.tgt_mask[:, 1:]
                loss = nc.cross_entropy(lg, tgt[:, 1:], w)
                total_nll += float(loss.data) * w.sum()
                total_tok += w.sum()
                if data.slot_positions is not None:
                    pred = lg.data.argmax(axis=-1)
                    for row, ex_i in enumerate(batch.index):
                        pos = data.slot_positions[ex_i]
                        hits += int(pred[row, pos] == tgt[row, pos + 1])
                        n_slots += 1
                if decode and pipelines is not None:
                    ann, visual = model.annotate(batch.src_ids, batch.src_mask, batch.images)
                    max_len = cfg.max_len_factor * batch.src_ids.shape[1]
                    hyps.extend(pipelines.tgt.decode(t) for t in model.decoder.greedy(ann, max_len, visual))
    finally:
        model.training = was_training
    out = {"dev_loss": total_nll / max(total_tok, 1.0)}
    if decode and pipelines is not None:
        out["dev_bleu"] = bleu(hyps, data.references)
        out["hypotheses"] = hyps
    if n_slots:
        out["ambiguous_accuracy"] = hits / n_slots
    return out


# ---------------------------------------------------------------------- training loop


@dataclass
class TrainResult:
    best_step: int
    best_bleu: float
    final_step: int
    stopped_early: bool
    rows: list = field(default_factory=list)
    best_eval: dict = field(default_factory=dict)
    seconds: float = 0.0


class Trainer:
    """Teacher-forced training with periodic dev evaluation and patience-based stopping.

    Randomness is keyed on (seed, step): the shuffle of epoch ``e`` uses
    ``[seed, e]`` and the dropout / augmentation of step ``s`` use ``[seed, s, k]``,
    so a run resumed from a checkpoint replays the uninterrupted trajectory.
    """

    def __init__(self, model: MMTModel, train_data: Dataset, dev_data: Dataset | None = None,
                 pipelines: Pipelines | None = None, out_dir=None, seed: int | None = None):
        self.model = model
        self.cfg = model.cfg
        self.train_data = train_data
        self.dev_data = dev_data if dev_data is not None else train_data
        self.pipelines = pipelines
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.seed = self.cfg.seed if seed is None else seed
        self.optimizer = Adam.from_config(model.store.trainable(), self.cfg)
        self.step = 0
        self.losses: list[float] = []

    def batch_for_step(self, step: int):
        n = len(self.train_data)
        per_epoch = -(-n // self.cfg.batch_size)
        epoch, k = divmod(step, per_epoch)
        order = np.random.default_rng([self.seed, epoch]).permutation(n)
        idx = order[k * self.cfg.batch_size:(k + 1) * self.cfg.batch_size]
        return collate([self.train_data.examples[i] for i in idx], self.cfg.max_sentence_length)

    def train_step(self) -> float:
        cfg, model = self.cfg, self.model
        batch = self.batch_for_step(self.step)
        prepare_images(batch, cfg, np.random.default_rng([self.seed, self.step, 1]))
        has_dropout = min(cfg.gru_input_dropout, cfg.gru_output_dropout, cfg.cgru_input_dropout,
                          cfg.cgru_output_dropout, cfg.softmax_output_dropout) < 1.0
        drop_rng = np.random.default_rng([self.seed, self.step, 2]) if has_dropout else None
        model.training = True
        self.optimizer.zero_grad()
        loss = model.loss(batch, drop_rng)
        value = float(loss.data)
        if not math.isfinite(value):
            self._dump_divergence(value)
            raise DivergenceError(f"loss became {value} at step {self.step}")
        loss.backward()
        self.optimizer.step()
        self.step += 1
        return value

    def _dump_divergence(self, value) -> None:
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        stats = {p.name: {"max_abs": float(np.abs(p.data).max()),
                          "finite": bool(np.isfinite(p.data).all())} for p in self.model.store}
        (self.out_dir / "divergence.json").write_text(
            json.dumps({"step": self.step, "loss": repr(value), "params": stats}, indent=1))

    def run(self, max_steps: int | None = None, evaluate_fn=None) -> TrainResult:
        cfg = self.cfg
        max_steps = cfg.max_steps if max_steps is None else max_steps
        start = time.perf_counter()
        rows, window = [], []
        best_bleu, best_step, best_state, best_eval = -1.0, self.step, snapshot(self.model), {}
        stopped = False
        csv_file = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            csv_path = self.out_dir / "metrics.csv"
            fresh = not csv_path.exists()
            csv_file = open(csv_path, "a", newline="")
            writer = csv.writer(csv_file, lineterminator="\n")
            if fresh:
                writer.writerow(METRICS_HEADER)
        try:
            while self.step < max_steps:
                window.append(self.train_step())
                self.losses.append(window[-1])
                if self.step % cfg.eval_every == 0 or self.step == max_steps:
                    ev = (evaluate_fn or evaluate)(self.model, self.dev_data, self.pipelines)
                    row = (self.step, float(np.mean(window)), ev["dev_loss"], ev.get("dev_bleu", 0.0))
                    rows.append(row)
                    window = []
                    if csv_file is not None:
                        writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
                        csv_file.flush()
                    log.info("step %d train %.4f dev %.4f bleu %.4f", *row)
                    metric = ev.get("dev_bleu", -ev["dev_loss"])
                    if metric > best_bleu:
                        best_bleu, best_step, best_eval = metric, self.step, ev
                        best_state = snapshot(self.model)
                    elif self.step - best_step >= cfg.patience:
                        stopped = True
                        break
        finally:
            if csv_file is not None:
                csv_file.close()
        final_step = self.step
        if self.out_dir is not None:
            self.save_state(self.out_dir / "state")
        restore(self.model, best_state)
        if self.out_dir is not None:
            save_checkpoint(self.out_dir / "checkpoint", self.model, best_step, None, self.pipelines)
        return TrainResult(best_step, best_bleu, final_step, stopped, rows, best_eval,
                           time.perf_counter() - start)

    def save_state(self, path) -> None:
        """Resumable checkpoint of the current (not best) state, with optimiser moments."""
        save_checkpoint(path, self.model, self.step, self.optimizer, self.pipelines)

    @classmethod
    def resume(cls, path, train_data: Dataset, dev_data: Dataset | None = None, out_dir=None,
               seed: int | None = None) -> "Trainer":
        model, manifest, pipelines = load_checkpoint(path)
        tr = cls(model, train_data, dev_data, pipelines, out_dir, seed)
        tr.step = manifest["step"]
        tr.optimizer.t = manifest["adam_t"]
        return tr


def train(variant: str, train_data: Dataset, dev_data: Dataset | None, cfg: ModelConfig,
          pipelines: Pipelines, out_dir=None, seed: int | None = None) -> tuple[MMTModel, TrainResult]:
    cfg = variant_config(variant, cfg)
    seed = cfg.seed if seed is None else seed
    model = MMTModel(cfg, len(pipelines.src.vocab), len(pipelines.tgt.vocab), seed=seed)
    pretrain_vision(model, seed)
    trainer = Trainer(model, train_data, dev_data, pipelines, out_dir, seed)
    return model, trainer.run()


# ---------------------------------------------------------------------- experiment grid


@dataclass
class GridRow:
    variant: str
    seed: int
    dev_bleu: float
    ambiguous_accuracy: float
    steps: int
    seconds: float


def run_grid(variants: Sequence[str], seeds: Sequence[int], cfg: ModelConfig, train_corpus: SynthCorpus,
             dev_corpus: SynthCorpus, stage_sets: Sequence[str] = ("all",)) -> list[GridRow]:
    """Train every (variant, CBN stage set, seed) triple and collect dev scores."""
    if len(seeds) < 2:
        raise ParameterError("a grid needs at least two seeds to report a spread")
    pipes = Pipelines.fit(train_corpus.src, train_corpus.tgt, cfg.bpe_merges)
    train_data, dev_data = pipes.synth_dataset(train_corpus), pipes.synth_dataset(dev_corpus)
    rows = []
    for variant in variants:
        for stages in stage_sets:
            name = variant if stages == "all" else f"{variant} [cbn {stages}]"
            for seed in seeds:
                c = cfg.replace(blocks_with_cbn=stages, seed=seed)
                _, res = train(variant, train_data, dev_data, c, pipes, seed=seed)
                ev = res.best_eval
                rows.append(GridRow(name, seed, ev.get("dev_bleu", 0.0),
                                    ev.get("ambiguous_accuracy", float("nan")), res.final_step, res.seconds))
    return rows


def aggregate(rows: Sequence[GridRow]) -> dict:
    """variant -> (mean, sd) of BLEU and ambiguous accuracy; sd is the sample deviation."""
    out = {}
    for name in dict.fromkeys(r.variant for r in rows):
        sub = [r for r in rows if r.variant == name]
        b = np.array([r.dev_bleu for r in sub])
        a = np.array([r.ambiguous_accuracy for r in sub])
        sd = (lambda x: float(x.std(ddof=1)) if len(x) > 1 else 0.0)
        out[name] = {"bleu": (float(b.mean()), sd(b)), "ambiguous": (float(a.mean()), sd(a)), "runs": len(sub)}
    return out


def format_table(rows: Sequence[GridRow]) -> str:
    agg = aggregate(rows)
    width = max(len("Model"), *(len(k) for k in agg))
    lines = [f"{'Model':<{width}}  {'BLEU':>13}  {'Ambiguous acc':>15}", "-" * (width + 32)]
    for name, v in agg.items():
        (bm, bs), (am, as_) = v["bleu"], v["ambiguous"]
        lines.append(f"{name:<{width}}  {100 * bm:6.1f} ± {100 * bs:4.1f}  {100 * am:8.1f} ± {100 * as_:4.1f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------- gradient checks


def gradcheck_config(**overrides) -> ModelConfig:
    """Tiny double-precision layout small enough to finite-difference every scalar."""
    from .config import desk_config

    base = dict(source_and_target_embeddings=4, gru_and_cgru_layer_size=3, attention_size=3,
                conditioning_size=3, cbn_mlp_hidden_units=4, resnet_input_size=(8, 8, 3),
                stage_channels=(2, 3, 4, 5), precision="double", pretrain_steps=0)
    base.update(overrides)
    return desk_config(**base)


def gradcheck_batch(cfg: ModelConfig, seed: int = 0):
    """Two right-padded sentence pairs with random images; vocabulary of 7 ids."""
    from types import SimpleNamespace

    rng = np.random.default_rng(seed)
    return SimpleNamespace(
        src_ids=np.array([[4, 5, 6], [5, 4, 0]]), src_mask=np.array([[1, 1, 1], [1, 1, 0.0]]),
        tgt_ids=np.array([[1, 4, 5, 2], [1, 6, 2, 0]]), tgt_mask=np.array([[1, 1, 1, 1], [1, 1, 1, 0.0]]),
        images=rng.normal(size=(2,) + tuple(cfg.resnet_input_size)))


def gradcheck_variant(variant: str, base: ModelConfig | None = None, eps: float = 1e-5,
                      seed: int = 0) -> nc.GradCheckReport:
    """Finite-difference check of the full training loss of one variant.

    Trainable parameters are jittered away from their initial values first so
    zero-initialised layers (CBN output, biases) are exercised at a generic point.
    """
    if not eps > 0:
        raise ParameterError("eps must be positive")
    cfg = variant_config(variant, base or gradcheck_config())
    if cfg.precision != "double":
        raise ParameterError("gradient checks run in double precision")
    model = MMTModel(cfg, 7, 7, seed=seed + 1)
    rng = np.random.default_rng(seed + 5)
    for p in model.store.trainable():
        p.value.data = p.data + rng.normal(0.0, 0.3, p.shape)
    batch = gradcheck_batch(cfg, seed)
    return nc.finite_difference_check(lambda: model.loss(batch), model.store, eps=eps)
