"""Corpus BLEU4 and segment-averaged character F-score (chrF3)."""
from __future__ import annotations

import math
from collections import Counter
from typing import Sequence

MAX_ORDER = 4
CHAR_ORDER = 6
CHRF_BETA = 3.0


def _tokens(s: str | Sequence[str]) -> list[str]:
    if isinstance(s, str):
        return s.lower().split()
    return [t.lower() for t in s]


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _check_pair(name: str, hyps, refs) -> None:
    if len(refs) == 0:
        raise ValueError(f"{name}: empty reference set")
    if len(hyps) != len(refs):
        raise ValueError(f"{name}: {len(hyps)} hypotheses vs {len(refs)} references")


def bleu_stats(hyps, refs) -> tuple[list[int], list[int], int, int]:
    """Clipped matches and totals per order, hypothesis and reference length."""
    _check_pair("bleu4", hyps, refs)
    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    hyp_len = ref_len = 0
    for h, r in zip(hyps, refs):
        h, r = _tokens(h), _tokens(r)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, MAX_ORDER + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    return matches, totals, hyp_len, ref_len


def bleu4(hyps, refs) -> float:
    """Case-insensitive corpus BLEU on whitespace tokens; no smoothing.

    Any order with zero matched n-grams (including a corpus too short to
    contain any) scores 0.
    """
    matches, totals, hyp_len, ref_len = bleu_stats(hyps, refs)
    if any(m == 0 for m in matches):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / MAX_ORDER
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return min(100.0, 100.0 * bp * math.exp(log_p))


def _chars(s: str) -> str:
    return "".join(s.split())


def chrf_segment(hyp: str, ref: str, beta: float = CHRF_BETA, order: int = CHAR_ORDER) -> float:
    """Precision and recall are averaged over the orders both sides can fill."""
    h, r = _chars(hyp), _chars(ref)
    if h == r:
        return 100.0
    precisions, recalls = [], []
    for n in range(1, order + 1):
        hc, rc = _ngrams(h, n), _ngrams(r, n)
        nh, nr = sum(hc.values()), sum(rc.values())
        if nh == 0 or nr == 0:
            continue
        m = sum((hc & rc).values())
        precisions.append(m / nh)
        recalls.append(m / nr)
    if not precisions:
        return 0.0
    p = sum(precisions) / len(precisions)
    rc_ = sum(recalls) / len(recalls)
    if p == 0.0 and rc_ == 0.0:
        return 0.0
    b2 = beta * beta
    return 100.0 * (1 + b2) * p * rc_ / (b2 * p + rc_)


def chrf3(hyps: Sequence[str], refs: Sequence[str]) -> float:
    """Macro average of per-segment chrF3."""
    _check_pair("chrf3", hyps, refs)
    hyps = [h if isinstance(h, str) else " ".join(h) for h in hyps]
    refs = [r if isinstance(r, str) else " ".join(r) for r in refs]
    return sum(chrf_segment(h, r) for h, r in zip(hyps, refs)) / len(refs)
