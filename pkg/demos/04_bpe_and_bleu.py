"""Subword segmentation and corpus BLEU.

BPE learns merges from word counts; a word is split into the longest learned
pieces, each non-final piece marked with "@@". Joining the pieces gives the
word back. BLEU compares clipped n-gram counts over a whole corpus.
Run:  python3 demos/04_bpe_and_bleu.py
"""
from mmtcbn.bleu import bleu
from mmtcbn.data import bpe_apply, bpe_join, bpe_learn

counts = {"low": 5, "lower": 2, "newest": 6, "widest": 3}
model = bpe_learn(counts, 3)
print("first merges:", model.merges)
for word in ("lowest", "newer", "widest"):
    pieces = bpe_apply(model, word)
    print(f"{word:>7} -> {' '.join(pieces):<22} rejoined: {bpe_join(pieces)}")

refs = ["le rond rouge attend ici", "un carre vert repose dessous"]
print("identical corpus:", bleu(refs, refs))
print("one wrong noun:  ", round(bleu(["le carre rouge attend ici", refs[1]], refs), 4))
print("too short:       ", round(bleu(["le rond rouge", refs[1]], refs), 4))
