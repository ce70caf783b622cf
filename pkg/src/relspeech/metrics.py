"""Evaluation metrics: word error rate and corpus BLEU."""

from __future__ import annotations

import math
from collections import Counter


def _edit_distance(ref: list, hyp: list) -> int:
    """Minimum edits (substitution/insertion/deletion, each cost 1).

    Row-by-row dynamic program: dp[i][j] is the distance between
    ref[:i] and hyp[:j]; only the previous row is kept.
    """
    previous = list(range(len(hyp) + 1))
    for i in range(1, len(ref) + 1):
        current = [i] + [0] * len(hyp)
        r = ref[i - 1]
        for j in range(1, len(hyp) + 1):
            if r == hyp[j - 1]:
                current[j] = previous[j - 1]
            else:
                current[j] = 1 + min(previous[j - 1], current[j - 1], previous[j])
        previous = current
    return previous[-1]


def wer(hyp, ref) -> float:
    """Edit distance between token sequences divided by reference length.

    Lengthy hypotheses can push the rate above 1.
    """
    ref = list(ref)
    hyp = list(hyp)
    if not ref:
        raise ValueError("reference must be nonempty")
    return _edit_distance(ref, hyp) / len(ref)


def token_error_rate(hyp_texts, ref_texts) -> float:
    """Corpus WER over characters: summed edit distance / summed ref length."""
    edits = 0
    total = 0
    for h, r in zip(hyp_texts, ref_texts):
        if not r:
            raise ValueError("reference must be nonempty")
        edits += _edit_distance(list(r), list(h))
        total += len(r)
    return edits / total


def _ngram_counts(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(hyps, refs) -> float:
    """Corpus-level BLEU-4 in [0, 100] against a single reference each.

    Geometric mean of clipped n-gram precisions (n = 1..4) times the
    brevity penalty. A zero precision for n >= 2 is smoothed add-one;
    a zero unigram precision stays zero, so disjoint corpora score 0.
    """
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    if not hyps:
        raise ValueError("empty corpus")
    hyps = [list(h) for h in hyps]
    refs = [list(r) for r in refs]
    hyp_len = sum(len(h) for h in hyps)
    ref_len = sum(len(r) for r in refs)
    if hyp_len == 0:
        return 0.0

    log_sum = 0.0
    for n in range(1, 5):
        matched = total = 0
        for h, r in zip(hyps, refs):
            counts = _ngram_counts(h, n)
            ref_counts = _ngram_counts(r, n)
            matched += sum(min(c, ref_counts[g]) for g, c in counts.items())
            total += max(len(h) - n + 1, 0)
        if n == 1:
            if matched == 0:
                return 0.0
            precision = matched / total
        elif matched == 0:
            precision = (matched + 1) / (total + 1)
        else:
            precision = matched / total
        log_sum += 0.25 * math.log(precision)

    brevity = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * brevity * math.exp(log_sum)
