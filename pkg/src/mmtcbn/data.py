"""Tokenisation, byte-pair encoding, vocabularies, batching, images and the synthetic corpus."""
from __future__ import annotations

import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import LengthError, ParameterError, SizeError, VocabularyError

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<s>", "</s>", "<unk>")
END_OF_WORD = "</w>"
CONTINUATION = "@@"

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def tokenize(sentence: str) -> list[str]:
    """Whitespace and punctuation splitting."""
    return _TOKEN_RE.findall(sentence)


def detokenize(tokens: Sequence[str]) -> str:
    return " ".join(tokens)


# ---------------------------------------------------------------------- BPE


@dataclass
class BPEModel:
    merges: list = field(default_factory=list)

    def __post_init__(self):
        self.merges = [tuple(m) for m in self.merges]
        self._ranks = {pair: i for i, pair in enumerate(self.merges)}

    def save(self, path) -> None:
        Path(path).write_text("".join(f"{a} {b}\n" for a, b in self.merges), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "BPEModel":
        merges = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                a, b = line.split(" ")
                merges.append((a, b))
        return cls(merges)

    def segment(self, token: str) -> list[str]:
        """Symbols of ``token`` after merging; the end marker is (part of) the last one."""
        if not token:
            return []
        symbols = list(token) + [END_OF_WORD]
        while len(symbols) > 1:
            ranked = [(self._ranks.get(p, None), i) for i, p in enumerate(zip(symbols, symbols[1:]))]
            ranked = [(r, i) for r, i in ranked if r is not None]
            if not ranked:
                break
            best = self.merges[min(ranked)[0]]
            symbols = _merge_pair(symbols, best)
        return symbols


def _merge_pair(symbols: list[str], pair: tuple) -> list[str]:
    out, i = [], 0
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == pair[0] and symbols[i + 1] == pair[1]:
            out.append(pair[0] + pair[1])
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


def bpe_learn(corpus, num_merges: int) -> BPEModel:
    """Learn merges from ``corpus`` (an iterable of token lists, or a token -> count mapping).

    Each round merges the most frequent adjacent pair; ties go to the
    lexicographically smallest pair.
    """
    if num_merges < 0:
        raise ParameterError("num_merges must be >= 0")
    if isinstance(corpus, dict):
        counts = Counter(corpus)
    else:
        counts = Counter(tok for sent in corpus for tok in sent)
    if not counts:
        raise ParameterError("cannot learn BPE from an empty corpus")
    words = {tuple(list(w) + [END_OF_WORD]): c for w, c in counts.items() if w}
    merges = []
    for _ in range(num_merges):
        pairs: Counter = Counter()
        for sym, c in words.items():
            for pair in zip(sym, sym[1:]):
                pairs[pair] += c
        if not pairs:
            break
        top = max(pairs.values())
        best = min(p for p, c in pairs.items() if c == top)
        merges.append(best)
        words = {tuple(_merge_pair(list(sym), best)): c for sym, c in words.items()}
    return BPEModel(merges)


def bpe_apply(model: BPEModel, token: str) -> list[str]:
    """Subwords of ``token``; every piece but the last ends with the continuation marker."""
    symbols = model.segment(token)
    if not symbols:
        return []
    if symbols[-1] == END_OF_WORD:
        symbols = symbols[:-1]
    else:
        symbols[-1] = symbols[-1][: -len(END_OF_WORD)]
    return [s + CONTINUATION for s in symbols[:-1]] + [symbols[-1]]


def bpe_join(subwords: Sequence[str]) -> str:
    """Inverse of :func:`bpe_apply` for one token."""
    return "".join(s[: -len(CONTINUATION)] if i < len(subwords) - 1 else s
                   for i, s in enumerate(subwords))


def join_subwords(subwords: Sequence[str]) -> list[str]:
    """Regroup a sentence's subword stream into whole tokens."""
    words, current = [], ""
    for s in subwords:
        if s.endswith(CONTINUATION):
            current += s[: -len(CONTINUATION)]
        else:
            words.append(current + s)
            current = ""
    if current:
        words.append(current)
    return words


# ---------------------------------------------------------------------- vocabulary


class Vocabulary:
    """Token <-> id bijection; ids 0-3 are pad, start, end and unknown."""

    def __init__(self, tokens: Sequence[str] = ()):
        self.itos = list(RESERVED)
        for t in tokens:
            if t in RESERVED:
                continue
            if t not in self.itos:
                self.itos.append(t)
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    @classmethod
    def build(cls, sentences) -> "Vocabulary":
        counts = Counter(tok for sent in sentences for tok in sent)
        return cls(sorted(counts, key=lambda t: (-counts[t], t)))

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        out = []
        for i in ids:
            if not 0 <= int(i) < len(self.itos):
                raise VocabularyError(f"id {i} outside vocabulary of size {len(self)}")
            out.append(self.itos[int(i)])
        return out

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.itos), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines = lines[:-1]
        if tuple(lines[:4]) != RESERVED:
            raise VocabularyError(f"{path}: first four entries must be {RESERVED}")
        v = cls()
        v.itos = lines
        v.stoi = {t: i for i, t in enumerate(lines)}
        if len(v.stoi) != len(v.itos):
            raise VocabularyError(f"{path}: duplicate tokens")
        return v


class TextPipeline:
    """tokenize -> BPE -> ids, and back."""

    def __init__(self, bpe: BPEModel, vocab: Vocabulary):
        self.bpe, self.vocab = bpe, vocab

    @classmethod
    def fit(cls, sentences: Sequence[str], num_merges: int) -> "TextPipeline":
        toks = [tokenize(s) for s in sentences]
        bpe = bpe_learn(toks, num_merges)
        pipe = cls(bpe, Vocabulary())
        pipe.vocab = Vocabulary.build(pipe.subwords(s) for s in sentences)
        return pipe

    def subwords(self, sentence: str) -> list[str]:
        return [p for tok in tokenize(sentence) for p in bpe_apply(self.bpe, tok)]

    def encode(self, sentence: str) -> list[int]:
        return self.vocab.encode(self.subwords(sentence))

    def decode(self, ids: Sequence[int]) -> str:
        ids = [i for i in ids if i not in (PAD, BOS, EOS)]
        return detokenize(join_subwords(self.vocab.decode(ids)))

    def word_starts(self, sentence: str) -> list[int]:
        """Subword index at which each token of ``sentence`` begins."""
        starts, n = [], 0
        for tok in tokenize(sentence):
            starts.append(n)
            n += len(bpe_apply(self.bpe, tok))
        return starts


# ---------------------------------------------------------------------- batching


@dataclass
class Example:
    src_ids: list
    tgt_ids: list
    image: np.ndarray | None = None
    index: int = 0


@dataclass
class Batch:
    src_ids: np.ndarray     # [B, M_max]
    tgt_ids: np.ndarray     # [B, K_max], starts with <s>, ends with </s>
    src_mask: np.ndarray
    tgt_mask: np.ndarray
    images: np.ndarray | None  # [B, H, W, 3]
    index: np.ndarray       # corpus position of each row

    def __len__(self):
        return self.src_ids.shape[0]


def _pad(rows: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(r) for r in rows)
    ids = np.full((len(rows), width), PAD, dtype=np.int64)
    mask = np.zeros((len(rows), width))
    for i, r in enumerate(rows):
        ids[i, :len(r)] = r
        mask[i, :len(r)] = 1.0
    return ids, mask


def collate(examples: Sequence[Example], max_len: int = 80) -> Batch:
    for ex in examples:
        if len(ex.src_ids) > max_len or len(ex.tgt_ids) > max_len:
            raise LengthError(f"example {ex.index} exceeds the length cap of {max_len}")
        if not ex.src_ids:
            raise LengthError(f"example {ex.index} has an empty source")
    src, src_mask = _pad([list(ex.src_ids) for ex in examples])
    tgt, tgt_mask = _pad([[BOS] + list(ex.tgt_ids) + [EOS] for ex in examples])
    images = None
    if examples[0].image is not None:
        images = np.stack([ex.image for ex in examples])
    return Batch(src, tgt, src_mask, tgt_mask, images, np.array([ex.index for ex in examples]))


def make_batches(examples: Sequence[Example], batch_size: int, shuffle_seed: int | None = None,
                 max_len: int = 80) -> Iterator[Batch]:
    """Yield padded batches; a seed shuffles the order reproducibly."""
    if not examples:
        raise ParameterError("cannot batch an empty corpus")
    order = np.arange(len(examples))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(examples))
    for start in range(0, len(order), batch_size):
        yield collate([examples[i] for i in order[start:start + batch_size]], max_len)


# ---------------------------------------------------------------------- images

IMAGE_MEAN = np.array([0.485, 0.456, 0.406])
_MAGIC = b"MMTI"


def write_image(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype="<f4")
    h, w, c = img.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<III", h, w, c))
        fh.write(img.tobytes(order="C"))


def read_image(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise SizeError(f"{path}: not an MMTI image")
    h, w, c = struct.unpack("<III", raw[4:16])
    data = np.frombuffer(raw, dtype="<f4", offset=16)
    if data.size != h * w * c:
        raise SizeError(f"{path}: header says {h}x{w}x{c} but holds {data.size} values")
    return data.reshape(h, w, c).astype(np.float64)


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1, :]


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    mx, mn = rgb.max(-1), rgb.min(-1)
    delta = mx - mn
    safe = np.where(delta > 0, delta, 1.0)
    h = np.where(mx == r, ((g - b) / safe) % 6, np.where(mx == g, (b - r) / safe + 2, (r - g) / safe + 4))
    h = np.where(delta > 0, h / 6.0, 0.0)
    s = np.where(mx > 0, delta / np.where(mx > 0, mx, 1.0), 0.0)
    return np.stack([h, s, mx], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0] % 1.0, hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6).astype(int) % 6
    f = h * 6 - np.floor(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    choices = [np.stack(c, -1) for c in ((v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q))]
    out = np.zeros(hsv.shape)
    for k, c in enumerate(choices):
        out = np.where((i == k)[..., None], c, out)
    return out


@dataclass
class JitterRanges:
    brightness_delta: float = 32.0 / 255.0
    contrast_range: tuple = (0.5, 1.5)
    saturation_range: tuple = (0.5, 1.5)
    hue_delta: float = 0.2


def preprocess_image(img: np.ndarray, mode: str = "vgg", rng=None, size: tuple | None = None,
                     flip: bool | None = None, jitter: JitterRanges | None = None) -> np.ndarray:
    """Crop, flip (and for ``inception`` colour-jitter) an image, then mean-centre it.

    Without ``rng`` the crop is central and nothing random happens. ``flip``
    forces the flip decision either way.
    """
    if mode not in ("vgg", "inception"):
        raise ParameterError(f"unknown preprocessing mode {mode!r}")
    img = np.asarray(img)
    img = img / 255.0 if img.dtype == np.uint8 else np.clip(img.astype(np.float64), 0.0, 1.0)
    H, W, _ = img.shape
    th, tw = size if size is not None else (H, W)
    if th > H or tw > W:
        raise SizeError(f"image {H}x{W} is smaller than the crop {th}x{tw}")
    if rng is not None:
        top, left = rng.integers(0, H - th + 1), rng.integers(0, W - tw + 1)
    else:
        top, left = (H - th) // 2, (W - tw) // 2
    img = img[top:top + th, left:left + tw]
    do_flip = flip if flip is not None else (rng is not None and rng.random() < 0.5)
    if do_flip:
        img = hflip(img)
    if mode == "inception" and rng is not None:
        j = jitter or JitterRanges()
        img = np.clip(img + rng.uniform(-j.brightness_delta, j.brightness_delta), 0, 1)
        hsv = rgb_to_hsv(img)
        hsv[..., 1] = np.clip(hsv[..., 1] * rng.uniform(*j.saturation_range), 0, 1)
        hsv[..., 0] = (hsv[..., 0] + rng.uniform(-j.hue_delta, j.hue_delta)) % 1.0
        img = hsv_to_rgb(hsv)
        factor = rng.uniform(*j.contrast_range)
        img = np.clip((img - img.mean(axis=(0, 1))) * factor + img.mean(axis=(0, 1)), 0, 1)
    return img - IMAGE_MEAN


# ---------------------------------------------------------------------- synthetic corpus

COLORS = {"red": ("rouge", (0.9, 0.1, 0.1)), "green": ("vert", (0.1, 0.8, 0.2)),
          "blue": ("bleu", (0.15, 0.25, 0.95)), "yellow": ("jaune", (0.95, 0.85, 0.1))}
SHAPES = {"circle": "rond", "square": "carre"}
VERBS = {"sits": "repose", "waits": "attend", "rests": "reste"}
PLACES = {"here": "ici", "there": "la", "above": "dessus", "below": "dessous"}
AMBIGUOUS_WORD = "mark"


@dataclass
class SynthCorpus:
    src: list
    tgt: list
    images: np.ndarray
    shapes: list
    slot: list          # target word index whose translation depends on the image

    def __len__(self):
        return len(self.src)

    def subset(self, idx) -> "SynthCorpus":
        idx = list(idx)
        return SynthCorpus([self.src[i] for i in idx], [self.tgt[i] for i in idx], self.images[idx],
                           [self.shapes[i] for i in idx], [self.slot[i] for i in idx])


def render_shape(shape: str, rgb, size: int, rng) -> np.ndarray:
    img = 0.1 + 0.03 * rng.standard_normal((size, size, 3))
    radius = rng.uniform(0.2, 0.32) * size
    half = radius * 0.886  # equal-area square
    extent = radius if shape == "circle" else half
    cy, cx = rng.uniform(extent, size - extent, size=2)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if shape == "circle":
        inside = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
    else:
        inside = (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)
    img[inside] = np.asarray(rgb) + 0.03 * rng.standard_normal((inside.sum(), 3))
    return np.clip(img, 0.0, 1.0)


def synth_corpus(n_examples: int, seed: int, size: int = 16, paired: bool = False) -> SynthCorpus:
    """Sentences about one coloured shape whose noun ("mark") only the image can disambiguate.

    With ``paired`` each sentence appears twice, once per shape, so any image-blind
    predictor is exactly at chance on the ambiguous slot.
    """
    if n_examples < 1:
        raise ParameterError("n_examples must be >= 1")
    rng = np.random.default_rng(seed)
    src, tgt, images, shapes, slots = [], [], [], [], []
    n_sent = (n_examples + 1) // 2 if paired else n_examples
    for _ in range(n_sent):
        color = list(COLORS)[rng.integers(len(COLORS))]
        verb = list(VERBS)[rng.integers(len(VERBS))]
        place = list(PLACES)[rng.integers(len(PLACES))]
        with_color = rng.random() < 0.5
        order = ["circle", "square"] if paired else [list(SHAPES)[rng.integers(2)]]
        if paired and rng.random() < 0.5:
            order.reverse()
        for shape in order:
            if with_color:
                s = f"a {color} {AMBIGUOUS_WORD} {verb} {place}"
                t = f"un {SHAPES[shape]} {COLORS[color][0]} {VERBS[verb]} {PLACES[place]}"
            else:
                s = f"the {AMBIGUOUS_WORD} {verb} {place}"
                t = f"le {SHAPES[shape]} {VERBS[verb]} {PLACES[place]}"
            src.append(s)
            tgt.append(t)
            shapes.append(shape)
            slots.append(1)
            images.append(render_shape(shape, COLORS[color][1], size, rng))
    n = n_examples
    return SynthCorpus(src[:n], tgt[:n], np.stack(images[:n]), shapes[:n], slots[:n])


def synth_images(n_images: int, seed: int, size: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Labelled images for pretraining the vision network; label = shape * 4 + colour."""
    rng = np.random.default_rng(seed)
    shapes, colors = list(SHAPES), list(COLORS)
    labels = rng.integers(len(shapes) * len(colors), size=n_images)
    images = np.stack([render_shape(shapes[k // len(colors)], COLORS[colors[k % len(colors)]][1], size, rng)
                       for k in labels])
    return images, labels


# ---------------------------------------------------------------------- corpus files


def write_corpus(directory, src: Sequence[str], tgt: Sequence[str], images=None,
                 prefix: str = "corpus") -> None:
    """``<prefix>.src``/``.tgt`` (one sentence per line), plus ``.idx`` and ``images/*.mmti``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / f"{prefix}.src").write_text("".join(s + "\n" for s in src), encoding="utf-8")
    (d / f"{prefix}.tgt").write_text("".join(t + "\n" for t in tgt), encoding="utf-8")
    if images is not None:
        (d / "images").mkdir(exist_ok=True)
        paths = []
        for i, img in enumerate(images):
            rel = f"images/{prefix}_{i:06d}.mmti"
            write_image(d / rel, img)
            paths.append(rel)
        (d / f"{prefix}.idx").write_text("".join(p + "\n" for p in paths), encoding="utf-8")


def read_lines(path) -> list[str]:
    text = Path(path).read_text(encoding="utf-8")
    return text.splitlines()


def read_corpus(directory, prefix: str = "corpus"):
    """Returns (src, tgt, images or None) from a directory written by :func:`write_corpus`."""
    d = Path(directory)
    src = read_lines(d / f"{prefix}.src")
    tgt_path = d / f"{prefix}.tgt"
    tgt = read_lines(tgt_path) if tgt_path.exists() else None
    images = read_image_index(d / f"{prefix}.idx") if (d / f"{prefix}.idx").exists() else None
    return src, tgt, images


def read_image_index(path) -> np.ndarray:
    base = Path(path).parent
    return np.stack([read_image(base / p) for p in read_lines(path) if p.strip()])
