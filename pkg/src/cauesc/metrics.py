"""Automatic response metrics and human A/B aggregation."""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import tokenize

BLEU_EPSILON = 1e-9


def _tok(x) -> list[str]:
    return tokenize(x) if isinstance(x, str) else list(x)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(hyps: Sequence, refs: Sequence, n: int = 4) -> float:
    """Corpus BLEU-n: uniform-weight geometric mean of clipped 1..n-gram
    precisions times the brevity penalty.  A zero precision is replaced by
    ``BLEU_EPSILON``.
    """
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    if not hyps:
        raise ValueError("BLEU of an empty corpus is undefined")
    matches = [0] * n
    totals = [0] * n
    hyp_len = ref_len = 0
    for h, r in zip(hyps, refs):
        h, r = _tok(h), _tok(r)
        hyp_len += len(h)
        ref_len += len(r)
        for k in range(1, n + 1):
            hc, rc = _ngrams(h, k), _ngrams(r, k)
            matches[k - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[k - 1] += max(len(h) - k + 1, 0)
    log_p = 0.0
    for m, t in zip(matches, totals):
        p = m / t if t else 0.0
        log_p += math.log(p if p > 0 else BLEU_EPSILON)
    if hyp_len == 0:
        return 0.0
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(log_p / n)


def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(hyps: Sequence, refs: Sequence) -> float:
    """Mean sentence-level ROUGE-L F1."""
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    if not hyps:
        raise ValueError("ROUGE-L of an empty corpus is undefined")
    scores = []
    for h, r in zip(hyps, refs):
        h, r = _tok(h), _tok(r)
        if not h or not r:
            scores.append(0.0)
            continue
        lcs = lcs_length(h, r)
        p, rec = lcs / len(h), lcs / len(r)
        scores.append(0.0 if p + rec == 0 else 2 * p * rec / (p + rec))
    return float(sum(scores) / len(scores))


def distinct(hyps: Iterable, n: int = 1) -> float:
    """Unique n-grams over total n-grams, pooled across all hypotheses."""
    if n < 1:
        raise ValueError("n must be >= 1")
    seen: set = set()
    total = 0
    for h in hyps:
        h = _tok(h)
        grams = [tuple(h[i:i + n]) for i in range(len(h) - n + 1)]
        total += len(grams)
        seen.update(grams)
    return len(seen) / total if total else 0.0


def perplexity(nll_sum: float, count: int) -> float:
    return math.exp(nll_sum / count) if count else float("inf")


def accuracy(pred: Sequence[int], gold: Sequence[int]) -> float:
    return float(np.mean(np.asarray(pred) == np.asarray(gold))) if len(gold) else 0.0


def confusion(pred: Sequence[int], gold: Sequence[int], n: int) -> np.ndarray:
    out = np.zeros((n, n), dtype=np.int64)
    for p, g in zip(pred, gold):
        out[g, p] += 1
    return out


# human evaluation --------------------------------------------------------

CHOICES = ("A", "B", "Tie")


def fleiss_kappa(table: np.ndarray) -> float:
    """Fleiss' kappa for an items x categories count table with a fixed
    number of ratings per item.  Perfect agreement with a single used
    category gives 1.0.
    """
    table = np.asarray(table, dtype=np.float64)
    per_item = table.sum(axis=1)
    if table.ndim != 2 or not len(table):
        raise ValueError("need a nonempty items x categories table")
    n = per_item[0]
    if n < 2 or np.any(per_item != n):
        raise ValueError("every item needs the same number (>= 2) of ratings")
    n_items = table.shape[0]
    p_j = table.sum(axis=0) / (n_items * n)
    p_i = ((table * (table - 1)).sum(axis=1)) / (n * (n - 1))
    p_bar = p_i.mean()
    p_e = float((p_j ** 2).sum())
    if p_e == 1.0:
        return 1.0
    return float((p_bar - p_e) / (1.0 - p_e))


@dataclass
class ABResult:
    win: int
    lose: int
    tie: int
    fleiss_kappa: float

    def as_dict(self) -> dict:
        return {"win": self.win, "lose": self.lose, "tie": self.tie, "fleiss_kappa": self.fleiss_kappa}


def aggregate_ab(votes: dict[str, list[str]]) -> ABResult:
    """Majority vote per item over A (win) / B (lose) / Tie.

    The first three votes of an item are the primary raters and define
    kappa; a fourth vote only settles a three-way split.
    """
    counts = {c: 0 for c in CHOICES}
    rows = []
    for item, choices in votes.items():
        bad = [c for c in choices if c not in CHOICES]
        if bad:
            raise ValueError(f"item {item}: unknown choice {bad[0]!r}")
        if len(choices) < 3:
            raise ValueError(f"item {item}: needs at least 3 votes, got {len(choices)}")
        primary = choices[:3]
        tally = Counter(primary)
        top, top_n = tally.most_common(1)[0]
        if top_n == 1:
            if len(choices) < 4:
                raise ValueError(f"item {item}: three-way split without a fourth vote")
            top = choices[3]
        counts[top] += 1
        rows.append([tally[c] for c in CHOICES])
    kappa = fleiss_kappa(np.asarray(rows)) if rows else float("nan")
    return ABResult(counts["A"], counts["B"], counts["Tie"], kappa)


def read_votes(path: str | Path) -> dict[str, list[str]]:
    """CSV with columns item_id, rater_id, choice; votes kept in file order."""
    votes: dict[str, list[str]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            votes.setdefault(row["item_id"], []).append(row["choice"].strip())
    return votes
