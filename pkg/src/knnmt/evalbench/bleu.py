"""Corpus-level BLEU-4 without smoothing."""

import math
from collections import Counter


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu_stats(hypotheses, references, max_order=4):
    """Summed clipped matches, totals per order, and hypothesis/reference lengths."""
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses but {len(references)} references")
    if not hypotheses:
        raise ValueError("BLEU needs at least one sentence pair")
    matches = [0] * max_order
    totals = [0] * max_order
    hyp_len = ref_len = 0
    for i, (hyp, ref) in enumerate(zip(hypotheses, references)):
        if len(ref) == 0:
            raise ValueError(f"reference {i} is empty")
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_order + 1):
            h = _ngrams(hyp, n)
            r = _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(0, len(hyp) - n + 1)
    return matches, totals, hyp_len, ref_len


def corpus_bleu(hypotheses, references, max_order=4):
    """BLEU in [0, 100]; any zero n-gram precision gives 0."""
    matches, totals, c, r = bleu_stats(hypotheses, references, max_order)
    if c == 0 or any(m == 0 for m in matches):
        return 0.0
    log_prec = sum(math.log(m / t) for m, t in zip(matches, totals)) / max_order
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return 100.0 * bp * math.exp(log_prec)
