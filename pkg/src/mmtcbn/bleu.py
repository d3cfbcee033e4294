"""Corpus-level BLEU."""
from __future__ import annotations

import math
from collections import Counter
from typing import Sequence

from .errors import ParameterError


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _tok(s) -> list[str]:
    return s.split() if isinstance(s, str) else list(s)


def bleu(candidates: Sequence, references: Sequence, max_n: int = 4) -> float:
    """Corpus BLEU in [0, 1].

    Clipped n-gram matches and candidate n-gram totals are summed over the
    corpus. Precisions for n >= 2 use add-one smoothing, ``(m + 1) / (c + 1)``;
    the unigram precision is unsmoothed, so no unigram overlap gives 0. Each
    reference entry may be a string or a list of alternative strings; the
    brevity penalty uses the reference length closest to each candidate.
    """
    if len(candidates) == 0:
        raise ParameterError("BLEU of an empty corpus is undefined")
    if len(candidates) != len(references):
        raise ParameterError(f"{len(candidates)} candidates but {len(references)} references")
    matches = [0] * max_n
    totals = [0] * max_n
    cand_len = ref_len = 0
    for cand, refs in zip(candidates, references):
        c = _tok(cand)
        refs = [refs] if isinstance(refs, str) else list(refs)
        refs = [_tok(r) for r in refs]
        cand_len += len(c)
        ref_len += min((abs(len(r) - len(c)), len(r)) for r in refs)[1]
        for n in range(1, max_n + 1):
            cn = _ngrams(c, n)
            best = Counter()
            for r in refs:
                best |= _ngrams(r, n)
            matches[n - 1] += sum(min(k, best[g]) for g, k in cn.items())
            totals[n - 1] += max(len(c) - n + 1, 0)
    if totals[0] == 0 or matches[0] == 0:
        return 0.0
    log_p = math.log(matches[0] / totals[0])
    for n in range(1, max_n):
        log_p += math.log((matches[n] + 1) / (totals[n] + 1))
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_p / max_n)
