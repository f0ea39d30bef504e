"""Error-rate and likelihood metrics over token-id sequences.

WER runs on ids, not strings -- the synthetic task has no orthography --
and always satisfies wer * n_ref == sub + del + ins exactly.  BLEU is
corpus-level with clipped n-gram precision and no smoothing unless asked.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from .lexicon import TokenSeq


@dataclass(frozen=True)
class WerReport:
    wer: float
    substitutions: int
    deletions: int
    insertions: int
    n_ref: int

    def as_dict(self) -> dict:
        return {"wer": self.wer, "sub": self.substitutions, "del": self.deletions,
                "ins": self.insertions, "n_ref": self.n_ref}

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True)

    def __add__(self, other: "WerReport") -> "WerReport":
        sub = self.substitutions + other.substitutions
        dele = self.deletions + other.deletions
        ins = self.insertions + other.insertions
        n = self.n_ref + other.n_ref
        return WerReport((sub + dele + ins) / n, sub, dele, ins, n)


def wer(ref: TokenSeq, hyp: TokenSeq) -> WerReport:
    """Minimal-edit alignment with unit costs.

    Backtrace prefers substitution/match over deletion over insertion at
    ties, so the decomposition is deterministic.
    """
    n, m = len(ref), len(hyp)
    if n == 0:
        raise ValueError("reference must be non-empty")
    # dist[i][j]: edits to turn ref[:i] into hyp[:j]
    dist = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        dist[i][0] = i
    for j in range(m + 1):
        dist[0][j] = j
    for i in range(1, n + 1):
        ri = ref[i - 1]
        row, prev = dist[i], dist[i - 1]
        for j in range(1, m + 1):
            row[j] = min(
                prev[j - 1] + (ri != hyp[j - 1]),
                prev[j] + 1,      # deletion
                row[j - 1] + 1,   # insertion
            )
    sub = dele = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i][j] == dist[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            sub += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and dist[i][j] == dist[i - 1][j] + 1:
            dele += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return WerReport((sub + dele + ins) / n, sub, dele, ins, n)


def corpus_wer(refs: Sequence[TokenSeq], hyps: Sequence[TokenSeq]) -> WerReport:
    if len(refs) != len(hyps) or not refs:
        raise ValueError("need equally many refs and hyps, at least one pair")
    total = wer(refs[0], hyps[0])
    for r, h in zip(refs[1:], hyps[1:]):
        total = total + wer(r, h)
    return total


def werr(baseline_wer: float, system_wer: float) -> float:
    """Relative error-rate reduction; positive means the system improved."""
    if baseline_wer <= 0:
        raise ValueError("baseline WER must be > 0")
    return (baseline_wer - system_wer) / baseline_wer


def _ngrams(seq: TokenSeq, n: int) -> Counter:
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def bleu(refs: Sequence[TokenSeq], hyps: Sequence[TokenSeq], max_n: int = 4,
         smooth: bool = False) -> float:
    """Corpus BLEU in [0, 100]: clipped n-gram precision under a geometric
    mean, times the brevity penalty exp(min(0, 1 - ref_len/hyp_len))."""
    if not hyps or len(refs) != len(hyps):
        raise ValueError("need equally many refs and hyps, at least one pair")
    matches = [0] * max_n
    totals = [0] * max_n
    ref_len = hyp_len = 0
    for r, h in zip(refs, hyps):
        ref_len += len(r)
        hyp_len += len(h)
        for n in range(1, max_n + 1):
            hc = _ngrams(h, n)
            rc = _ngrams(r, n)
            totals[n - 1] += sum(hc.values())
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
    if hyp_len == 0:
        return 0.0
    log_p = 0.0
    for k in range(max_n):
        num, den = matches[k], totals[k]
        if smooth:
            num, den = num + 1, den + 1
        if num == 0 or den == 0:
            return 0.0
        log_p += math.log(num / den)
    bp = math.exp(min(0.0, 1.0 - ref_len / hyp_len))
    return 100.0 * bp * math.exp(log_p / max_n)
