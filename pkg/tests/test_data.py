import colorsys
import string

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmtcbn.data import (
    BOS,
    EOS,
    IMAGE_MEAN,
    BPEModel,
    Example,
    TextPipeline,
    Vocabulary,
    bpe_apply,
    bpe_join,
    bpe_learn,
    collate,
    detokenize,
    hsv_to_rgb,
    make_batches,
    preprocess_image,
    read_corpus,
    read_image,
    rgb_to_hsv,
    synth_corpus,
    synth_images,
    tokenize,
    write_corpus,
    write_image,
)
from mmtcbn.errors import LengthError, ParameterError, SizeError, VocabularyError


def test_tokenize_splits_punctuation():
    assert tokenize("Hello, world!") == ["Hello", ",", "world", "!"]
    assert detokenize(tokenize("a b  c")) == "a b c"


def test_bpe_canonical_merges():
    model = bpe_learn({"low": 5, "lower": 2, "newest": 6, "widest": 3}, 3)
    assert model.merges == [("e", "s"), ("es", "t"), ("est", "</w>")]
    assert bpe_apply(model, "lowest") == ["l@@", "o@@", "w@@", "est"]


def test_bpe_later_merges_build_words():
    model = bpe_learn({"low": 5, "lower": 2, "newest": 6, "widest": 3}, 10)
    assert ("l", "o") in model.merges
    assert bpe_apply(model, "low") == ["low"]


def test_bpe_zero_merges_gives_characters():
    model = bpe_learn(["abc"], 0)
    assert bpe_apply(model, "abc") == ["a@@", "b@@", "c"]


def test_bpe_save_load(tmp_path):
    model = bpe_learn({"banana": 3, "bandana": 2}, 6)
    model.save(tmp_path / "m.bpe")
    assert BPEModel.load(tmp_path / "m.bpe").merges == model.merges


@settings(max_examples=50, deadline=None)
@given(st.lists(st.text(alphabet=string.ascii_lowercase, min_size=1, max_size=12), min_size=1, max_size=30),
       st.integers(0, 40))
def test_bpe_round_trip(words, merges):
    model = bpe_learn(words, merges)
    for w in words + ["zzzq", "unseen"]:
        assert bpe_join(bpe_apply(model, w)) == w


def test_vocabulary_order_and_unknown(tmp_path):
    v = Vocabulary.build([["b", "a", "b"], ["c", "a", "b"]])
    assert v.itos[4:] == ["b", "a", "c"]
    assert v.encode(["a", "zz"]) == [5, 3]
    v.save(tmp_path / "v")
    assert Vocabulary.load(tmp_path / "v").itos == v.itos
    with pytest.raises(VocabularyError):
        v.decode([99])
    (tmp_path / "bad").write_text("x\ny\n")
    with pytest.raises(VocabularyError):
        Vocabulary.load(tmp_path / "bad")


def test_pipeline_round_trip():
    sents = ["the cat sat on the mat .", "a dog sat"]
    pipe = TextPipeline.fit(sents, 5)
    for s in sents:
        assert pipe.decode(pipe.encode(s)) == s
    starts = pipe.word_starts("the cat")
    assert starts[0] == 0 and starts[1] == len(bpe_apply(pipe.bpe, "the"))


def test_collate_masks_and_markers():
    batch = collate([Example([4, 5, 6], [7]), Example([4], [8, 9])])
    np.testing.assert_array_equal(batch.src_mask, [[1, 1, 1], [1, 0, 0]])
    np.testing.assert_array_equal(batch.tgt_ids, [[BOS, 7, EOS, 0], [BOS, 8, 9, EOS]])
    np.testing.assert_array_equal(batch.tgt_mask.sum(axis=1), [3, 4])


def test_collate_length_cap():
    with pytest.raises(LengthError):
        collate([Example([4] * 5, [5])], max_len=4)
    with pytest.raises(LengthError):
        collate([Example([], [5])])


def test_make_batches_shuffle_is_seeded():
    exs = [Example([4 + i], [5], index=i) for i in range(10)]
    a = [b.index.tolist() for b in make_batches(exs, 3, shuffle_seed=1)]
    b = [b.index.tolist() for b in make_batches(exs, 3, shuffle_seed=1)]
    assert a == b and sorted(sum(a, [])) == list(range(10))
    with pytest.raises(ParameterError):
        list(make_batches([], 3))


def test_image_round_trip(tmp_path, rng):
    img = rng.random((5, 7, 3)).astype(np.float32)
    write_image(tmp_path / "x.mmti", img)
    raw = (tmp_path / "x.mmti").read_bytes()
    assert raw[:4] == b"MMTI" and len(raw) == 16 + 5 * 7 * 3 * 4
    np.testing.assert_array_equal(read_image(tmp_path / "x.mmti"), img)
    (tmp_path / "bad.mmti").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(SizeError):
        read_image(tmp_path / "bad.mmti")


def test_hsv_matches_colorsys(rng):
    rgb = rng.random((20, 3))
    hsv = rgb_to_hsv(rgb)
    for px, ours in zip(rgb, hsv):
        np.testing.assert_allclose(ours, colorsys.rgb_to_hsv(*px), atol=1e-12)
    np.testing.assert_allclose(hsv_to_rgb(hsv), rgb, atol=1e-12)


def test_preprocess_center_crop_and_mean(rng):
    img = rng.random((10, 10, 3))
    out = preprocess_image(img, size=(6, 6))
    np.testing.assert_allclose(out, img[2:8, 2:8] - IMAGE_MEAN)
    flipped = preprocess_image(img, size=(6, 6), flip=True)
    np.testing.assert_allclose(flipped, out[:, ::-1])
    with pytest.raises(SizeError):
        preprocess_image(img, size=(12, 12))


def test_preprocess_random_is_seeded(rng):
    img = rng.random((10, 10, 3))
    a = preprocess_image(img, "inception", np.random.default_rng(4), (8, 8))
    b = preprocess_image(img, "inception", np.random.default_rng(4), (8, 8))
    np.testing.assert_array_equal(a, b)
    assert a.shape == (8, 8, 3)


def _looks_square(img):
    # an axis-aligned square fills its bounding box; a digitised disc never reaches the corners
    fg = np.abs(img - 0.1).max(axis=-1) > 0.25
    ys, xs = np.nonzero(fg)
    box = (ys.max() - ys.min() + 1) * (xs.max() - xs.min() + 1)
    return fg.sum() == box


def test_synth_labels_follow_pixels():
    corpus = synth_corpus(200, seed=3)
    guesses = ["square" if _looks_square(im) else "circle" for im in corpus.images]
    assert guesses == corpus.shapes


def test_synth_paired_is_blind_chance():
    corpus = synth_corpus(100, seed=5, paired=True)
    by_src = {}
    for s, t in zip(corpus.src, corpus.tgt):
        by_src.setdefault(s, []).append(t.split()[1])
    best_blind = sum(max(v.count(w) for w in set(v)) for v in by_src.values()) / len(corpus)
    assert best_blind == 0.5


def test_synth_deterministic_and_ambiguous():
    a, b = synth_corpus(20, seed=1), synth_corpus(20, seed=1)
    assert a.src == b.src and np.array_equal(a.images, b.images)
    assert all("mark" in s for s in a.src)
    assert all(t.split()[slot] in ("rond", "carre") for t, slot in zip(a.tgt, a.slot))
    with pytest.raises(ParameterError):
        synth_corpus(0, seed=1)


def test_synth_images_labels():
    imgs, labels = synth_images(50, seed=0, size=12)
    assert imgs.shape == (50, 12, 12, 3) and set(labels) <= set(range(8))
    assert all(_looks_square(im) == (k // 4 == 1) for im, k in zip(imgs, labels))


def test_corpus_files_round_trip(tmp_path):
    c = synth_corpus(6, seed=2)
    write_corpus(tmp_path, c.src, c.tgt, c.images)
    src, tgt, images = read_corpus(tmp_path)
    assert src == c.src and tgt == c.tgt
    np.testing.assert_allclose(images, c.images, atol=1e-7)
