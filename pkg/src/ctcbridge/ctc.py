"""CTC loss, decoding, and a brute-force alignment oracle.

The loss runs the standard forward recursion over the 2N+1 extended label
sequence, built entirely from tape ops (log-softmax, gather, shift,
logaddexp) so its gradient comes from the same machinery as every other
op.  The recursion itself runs under float64 storage -- the dynamic
program is exactly the place where 32-bit accumulation drifts -- and only
the final scalar is rounded back.

Decoding offers per-frame argmax (greedy) and prefix beam search that
keeps per-prefix (blank-ending, symbol-ending) log masses, merges
identical prefixes by log-add after every frame, and prunes afterwards.
Scores carry no length normalisation.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .lexicon import Alignment, LogitGram, Posteriorgram, TokenSeq, collapse

INFEASIBLE_LOSS = 1.0e30  # sentinel: exp(-loss) == 0, gradient-free

_LOG_PROB_FLOOR = 1e-37  # keeps log() of exact-zero posteriors finite


@dataclass(frozen=True)
class CtcLoss:
    loss: "tt.Tensor"
    feasible: bool


@dataclass(frozen=True)
class NBestList:
    hypotheses: tuple[tuple[TokenSeq, float], ...]  # (tokens, log prob), best first
    beam_size: int
    n: int

    def __post_init__(self):
        scores = [s for _, s in self.hypotheses]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ValueError("n-best hypotheses must be sorted by score descending")
        seqs = [h for h, _ in self.hypotheses]
        if len(set(seqs)) != len(seqs):
            raise ValueError("n-best hypotheses must be distinct")
        if len(self.hypotheses) > self.n:
            raise ValueError("more hypotheses than requested")

    def top(self) -> TokenSeq:
        return self.hypotheses[0][0]


def min_frames(y: TokenSeq) -> int:
    """Frames needed to emit y: one per token plus a blank between repeats."""
    return len(y) + sum(1 for a, b in zip(y, y[1:]) if a == b)


def ctc_loss(z: LogitGram, y: TokenSeq, blank_id: int) -> CtcLoss:
    """-log P(y | z) summed over all alignments, differentiable through z.

    Infeasible targets (more symbols than frames can carry) return the
    INFEASIBLE_LOSS sentinel with `feasible=False` instead of raising, so a
    training loop can skip and count them.
    """
    logits = z.logits
    t_frames, width = logits.shape
    if t_frames < 1:
        raise ValueError("logit gram needs at least one frame")
    if width != blank_id + 1:
        raise ValueError(f"logit gram width {width} does not match blank id {blank_id}")
    if any(not 0 <= c < blank_id for c in y):
        raise ValueError("target contains ids outside [0, V)")
    if min_frames(y) > t_frames:
        return CtcLoss(tt.Tensor(np.float32(INFEASIBLE_LOSS)), False)

    n = len(y)
    s = 2 * n + 1
    ext = np.empty(s, dtype=np.intp)
    ext[0::2] = blank_id
    ext[1::2] = np.asarray(y, dtype=np.intp)

    # states whose s-2 transition is allowed: non-blank and not a repeat
    skip_ok = np.full(s, tt.LOG_ZERO, dtype=np.float64)
    for i in range(2, s):
        if ext[i] != blank_id and ext[i] != ext[i - 2]:
            skip_ok[i] = 0.0

    init = np.full(s, tt.LOG_ZERO, dtype=np.float64)
    init[0] = 0.0
    if s > 1:
        init[1] = 0.0

    with tt.precision(np.float64):
        logp = tt.log_softmax(logits)
        flat_ids = (np.arange(t_frames)[:, None] * width + ext[None, :]).reshape(-1)
        emit = tt.reshape(tt.gather_flat(logp, flat_ids), (t_frames, s))

        alpha = tt.reshape(tt.slice_rows(emit, 0, 1), (s,)) + tt.Tensor(init)
        skip_mask = tt.Tensor(skip_ok)
        for t in range(1, t_frames):
            stay_or_move = tt.logaddexp(alpha, tt.shift(alpha, 1))
            skipped = tt.shift(alpha, 2) + skip_mask
            alpha = tt.logaddexp(stay_or_move, skipped) + tt.reshape(
                tt.slice_rows(emit, t, t + 1), (s,)
            )

        if s == 1:
            total = tt.gather_flat(alpha, [0])
        else:
            tail = tt.gather_flat(alpha, [s - 2, s - 1])
            total = tt.logsumexp(tail)
        loss64 = tt.reshape(tt.neg(total), ())

    # round the accumulated scalar back to storage precision
    loss = tt.mul(loss64, 1.0)
    return CtcLoss(loss, True)


def alignment_oracle(y: TokenSeq, frames: int, vocab_size: int, blank_id: int | None = None) -> set[Alignment]:
    """Exact A(y) by filtering every (V+1)^T path; guarded to tiny instances."""
    if frames > 8 or vocab_size > 4:
        raise ValueError("alignment oracle is limited to frames <= 8 and V <= 4")
    blank = vocab_size if blank_id is None else blank_id
    target = tuple(y)
    return {
        path
        for path in itertools.product(range(vocab_size + 1), repeat=frames)
        if collapse(path, blank) == target
    }


def greedy_decode(p: Posteriorgram) -> TokenSeq:
    """Per-frame argmax (ties take the lowest index), then collapse."""
    path = tuple(int(i) for i in np.argmax(p.probs, axis=1))
    return collapse(path, p.width - 1)


def beam_search(p: Posteriorgram, beam: int, n: int) -> NBestList:
    """Prefix beam search over the posteriorgram.

    Each live prefix tracks log mass split by whether its last frame was
    blank; extending with the last symbol again only grows the prefix from
    the blank-ending mass (the other mass merges into the same prefix).
    """
    if not beam >= n >= 1:
        raise ValueError("need beam >= n >= 1")
    probs = np.asarray(p.probs, dtype=np.float64)
    logp = np.log(np.maximum(probs, _LOG_PROB_FLOOR))
    t_frames, width = logp.shape
    v = width - 1
    neg_inf = -math.inf

    beams: dict[TokenSeq, list[float]] = {(): [0.0, neg_inf]}  # prefix -> [blank-ending, symbol-ending]
    for t in range(t_frames):
        lp = logp[t]
        nxt: dict[TokenSeq, list[float]] = {}

        def slot(prefix):
            e = nxt.get(prefix)
            if e is None:
                e = [neg_inf, neg_inf]
                nxt[prefix] = e
            return e

        for prefix, (pb, pnb) in beams.items():
            total = np.logaddexp(pb, pnb)
            here = slot(prefix)
            here[0] = np.logaddexp(here[0], total + lp[v])
            if prefix:
                here[1] = np.logaddexp(here[1], pnb + lp[prefix[-1]])
            for c in range(v):
                grown = slot(prefix + (c,))
                src = pb if (prefix and c == prefix[-1]) else total
                grown[1] = np.logaddexp(grown[1], src + lp[c])

        ranked = sorted(
            nxt.items(), key=lambda kv: (-np.logaddexp(kv[1][0], kv[1][1]), kv[0])
        )
        beams = dict(ranked[:beam])

    scored = sorted(
        ((prefix, float(np.logaddexp(pb, pnb))) for prefix, (pb, pnb) in beams.items()),
        key=lambda kv: (-kv[1], kv[0]),
    )
    return NBestList(tuple(scored[:n]), beam_size=beam, n=n)


def nbest_to_json(utt_id: str, nbest: NBestList) -> str:
    return json.dumps(
        {"utt": utt_id,
         "hyps": [{"tokens": list(h), "logp": s} for h, s in nbest.hypotheses],
         "beam": nbest.beam_size,
         "n": nbest.n},
        sort_keys=True,
    )


def nbest_from_json(line: str) -> tuple[str, NBestList]:
    d = json.loads(line)
    hyps = tuple((tuple(h["tokens"]), float(h["logp"])) for h in d["hyps"])
    return d["utt"], NBestList(hyps, beam_size=d["beam"], n=d["n"])
