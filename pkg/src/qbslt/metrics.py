"""Corpus BLEU-1..4 and sentence-averaged ROUGE-L F1."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

Tokens = Sequence


@dataclass
class ScoreReport:
    B1: float
    B2: float
    B3: float
    B4: float
    ROUGE: float
    sentences: int

    def as_dict(self) -> dict[str, float]:
        return {"B1": self.B1, "B2": self.B2, "B3": self.B3, "B4": self.B4, "ROUGE": self.ROUGE}

    def lines(self) -> list[str]:
        """Machine-readable ``metric=value`` lines (scores in [0, 1])."""
        out = [f"{k}={v:.10f}" for k, v in self.as_dict().items()]
        out.append(f"sentences={self.sentences}")
        return out

    def table(self) -> str:
        keys = list(self.as_dict())
        head = " | ".join(f"{k:>6}" for k in keys)
        row = " | ".join(f"{100 * v:6.2f}" for v in self.as_dict().values())
        return f"{head}\n{row}"


def _check(hyps, refs) -> None:
    if len(hyps) != len(refs):
        raise ValueError(f"hypothesis count {len(hyps)} != reference count {len(refs)}")
    if not hyps:
        raise ValueError("empty corpus")


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def clipped_precision(hyps, refs, n: int) -> tuple[int, int]:
    """Corpus-level (clipped matches, hypothesis n-gram total) for order ``n``."""
    matches = total = 0
    for h, r in zip(hyps, refs):
        hc, rc = ngrams(h, n), ngrams(r, n)
        matches += sum(min(c, rc[g]) for g, c in hc.items())
        total += max(len(h) - n + 1, 0)
    return matches, total


def bleu_n(hyps, refs, n: int = 4) -> float:
    _check(hyps, refs)
    if not 1 <= n <= 4:
        raise ValueError(f"BLEU order must be in 1..4, got {n}")
    c = sum(len(h) for h in hyps)
    r = sum(len(x) for x in refs)
    if c == 0:
        return 0.0
    log_sum = 0.0
    for k in range(1, n + 1):
        m, t = clipped_precision(hyps, refs, k)
        if m == 0 or t == 0:
            return 0.0
        log_sum += math.log(m / t)
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return bp * math.exp(log_sum / n)


def lcs_length(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(hyp: Tokens, ref: Tokens) -> float:
    if not hyp or not ref:
        return 0.0
    lcs = lcs_length(hyp, ref)
    p, r = lcs / len(hyp), lcs / len(ref)
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def rouge(hyps, refs) -> float:
    _check(hyps, refs)
    return sum(rouge_l(h, r) for h, r in zip(hyps, refs)) / len(hyps)


def score(hyps, refs) -> ScoreReport:
    return ScoreReport(
        B1=bleu_n(hyps, refs, 1), B2=bleu_n(hyps, refs, 2),
        B3=bleu_n(hyps, refs, 3), B4=bleu_n(hyps, refs, 4),
        ROUGE=rouge(hyps, refs), sentences=len(hyps),
    )
