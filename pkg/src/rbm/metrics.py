"""ROUGE-1/2, ROUGE-L and bigram BLEU on token sequences (single reference)."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

ROUGE_L_BETA = 1.2


def _tokens(s) -> tuple[str, ...]:
    if isinstance(s, str):
        return tuple(s.split())
    return tuple(getattr(s, "tokens", s))


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _check_reference(ref) -> None:
    if not ref:
        raise ValueError("reference must be non-empty")


def rouge_n(candidate, reference, n: int = 1) -> float:
    """Clipped n-gram recall of ``candidate`` against ``reference``.

    A reference too short to contain any n-gram scores 1.0 only against an
    identical candidate, else 0.0.
    """
    cand, ref = _tokens(candidate), _tokens(reference)
    _check_reference(ref)
    if n < 1:
        raise ValueError("n must be positive")
    ref_counts = _ngrams(ref, n)
    total = sum(ref_counts.values())
    if total == 0:
        return 1.0 if cand == ref else 0.0
    if len(cand) < n:
        return 0.0
    cand_counts = _ngrams(cand, n)
    overlap = sum(min(c, ref_counts[g]) for g, c in cand_counts.items())
    return overlap / total


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference, beta: float = ROUGE_L_BETA) -> float:
    """LCS F-measure ``(1+b^2) R P / (R + b^2 P)``."""
    cand, ref = _tokens(candidate), _tokens(reference)
    _check_reference(ref)
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    r, p = lcs / len(ref), lcs / len(cand)
    b2 = beta * beta
    return (1 + b2) * r * p / (r + b2 * p)


def bleu2(candidate, reference) -> float:
    """Sentence BLEU with uniform weights over 1- and 2-grams.

    An order with zero clipped matches uses (0 + 1) / (count + 1) instead of 0.
    Brevity penalty ``exp(1 - r/c)`` applies when the candidate is shorter.
    """
    cand, ref = _tokens(candidate), _tokens(reference)
    _check_reference(ref)
    if not cand:
        return 0.0
    log_p = 0.0
    for n in (1, 2):
        cc = _ngrams(cand, n)
        rc = _ngrams(ref, n)
        matches = sum(min(c, rc[g]) for g, c in cc.items())
        count = sum(cc.values())
        if matches == 0:
            matches, count = matches + 1, count + 1
        log_p += 0.5 * math.log(matches / count)
    c, r = len(cand), len(ref)
    bp = 1.0 if c >= r else math.exp(1 - r / c)
    return bp * math.exp(log_p)


@dataclass
class SentenceScores:
    rouge1: float
    rouge2: float
    rougeL: float
    bleu: float


def sentence_scores(candidate, reference) -> SentenceScores:
    return SentenceScores(rouge_n(candidate, reference, 1), rouge_n(candidate, reference, 2),
                          rouge_l(candidate, reference), bleu2(candidate, reference))


@dataclass
class MetricReport:
    rouge1: float
    rouge2: float
    rougeL: float
    bleu: float
    per_sentence: list[SentenceScores] = field(default_factory=list)

    def as_dict(self) -> dict[str, float]:
        return {"rouge1": self.rouge1, "rouge2": self.rouge2, "rougeL": self.rougeL, "bleu": self.bleu}


def corpus_report(candidates: Sequence, references: Sequence) -> MetricReport:
    """Per-sentence scores and their corpus means."""
    if len(candidates) != len(references):
        raise ValueError("candidates and references differ in length")
    rows = [sentence_scores(c, r) for c, r in zip(candidates, references)]
    if not rows:
        return MetricReport(0.0, 0.0, 0.0, 0.0, [])
    n = len(rows)
    return MetricReport(
        sum(s.rouge1 for s in rows) / n,
        sum(s.rouge2 for s in rows) / n,
        sum(s.rougeL for s in rows) / n,
        sum(s.bleu for s in rows) / n,
        rows,
    )
