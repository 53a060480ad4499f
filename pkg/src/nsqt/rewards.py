"""Sentence-level rewards on token-id sequences: GLEU (training) and BLEU (eval).

All functions are pure and safe to call from any number of threads. Rewards
operate on token ids, never on detokenized strings, and always land in [0, 1].
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

MAX_N = 4


def ngram_counts(tokens, max_n=MAX_N):
    """Multiset of all contiguous n-grams for n in 1..max_n."""
    if max_n < 1:
        raise ValueError(f"max_n must be >= 1, got {max_n}")
    tokens = tuple(tokens)
    counts = Counter()
    for n in range(1, max_n + 1):
        for i in range(len(tokens) - n + 1):
            counts[tokens[i : i + n]] += 1
    return counts


def _clipped_matches(hyp_counts, ref_counts):
    return sum(min(c, ref_counts[g]) for g, c in hyp_counts.items() if g in ref_counts)


def gleu(hyp, ref, max_n=MAX_N):
    """Pooled GLEU: min of clipped n-gram precision and recall over n=1..max_n.

    Identical sequences score 1; if either side has no n-grams and the
    sequences differ, the score is 0.
    """
    hyp, ref = tuple(hyp), tuple(ref)
    if hyp == ref:
        return 1.0
    hyp_counts = ngram_counts(hyp, max_n)
    ref_counts = ngram_counts(ref, max_n)
    total_hyp = sum(hyp_counts.values())
    total_ref = sum(ref_counts.values())
    if total_hyp == 0 or total_ref == 0:
        return 0.0
    matched = _clipped_matches(hyp_counts, ref_counts)
    return min(matched / total_hyp, matched / total_ref)


def bleu_sentence(hyp, ref):
    """Smoothed sentence BLEU: 4-gram precisions with add-one smoothing for
    n >= 2, geometric mean, times the brevity penalty. Empty hypothesis
    scores 0."""
    hyp, ref = tuple(hyp), tuple(ref)
    if not hyp:
        return 0.0
    log_prec = 0.0
    for n in range(1, MAX_N + 1):
        hyp_n = Counter(hyp[i : i + n] for i in range(len(hyp) - n + 1))
        ref_n = Counter(ref[i : i + n] for i in range(len(ref) - n + 1))
        matched = _clipped_matches(hyp_n, ref_n)
        total = sum(hyp_n.values())
        if n >= 2:
            matched += 1
            total += 1
        if matched == 0 or total == 0:
            return 0.0
        log_prec += math.log(matched / total)
    bp = math.exp(min(0.0, 1.0 - len(ref) / len(hyp)))
    return bp * math.exp(log_prec / MAX_N)


def corpus_bleu(hyps, refs):
    """Corpus-level 4-gram BLEU: counts pooled over the corpus, no smoothing."""
    matched = [0] * MAX_N
    total = [0] * MAX_N
    hyp_len = ref_len = 0
    for hyp, ref in zip(hyps, refs, strict=True):
        hyp, ref = tuple(hyp), tuple(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, MAX_N + 1):
            hyp_n = Counter(hyp[i : i + n] for i in range(len(hyp) - n + 1))
            ref_n = Counter(ref[i : i + n] for i in range(len(ref) - n + 1))
            matched[n - 1] += _clipped_matches(hyp_n, ref_n)
            total[n - 1] += sum(hyp_n.values())
    if hyp_len == 0 or any(m == 0 for m in matched):
        return 0.0
    log_prec = sum(math.log(m / t) for m, t in zip(matched, total))
    bp = math.exp(min(0.0, 1.0 - ref_len / hyp_len))
    return bp * math.exp(log_prec / MAX_N)


@dataclass(frozen=True)
class RewardFn:
    """A named reward: GLEU for training, smoothed BLEU for evaluation."""

    kind: str = "GLEU"
    max_n: int = MAX_N

    def __post_init__(self):
        if self.kind not in ("GLEU", "BLEU"):
            raise ValueError(f"unknown reward kind {self.kind!r}")

    def __call__(self, hyp, ref):
        if self.kind == "GLEU":
            return gleu(hyp, ref, self.max_n)
        return bleu_sentence(hyp, ref)


def memoize_reward(reward):
    """Cache a pure reward function on (hyp, ref) tuples.

    Useful when an estimator evaluates the same tiny sequences many times.
    """
    cache = {}

    def wrapped(hyp, ref):
        key = (tuple(hyp), tuple(ref))
        hit = cache.get(key)
        if hit is None:
            hit = cache[key] = reward(key[0], key[1])
        return hit

    return wrapped
