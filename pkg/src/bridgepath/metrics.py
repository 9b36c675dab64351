"""Automatic evaluation: corpus BLEU-n, Distinct-n, Entropy-n, perplexity.

BLEU is corpus-level with per-hypothesis clipping against the maximum
reference count and a brevity penalty against the closest reference
length. Distinct and Entropy are computed corpus-wide over all
hypotheses. Zero precisions are smoothed with a 1e-9 epsilon so small
corpora never hit minus infinity.
"""

from __future__ import annotations

import json
import math
import warnings
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from .corpus import Dialogue
from .distill import corpus_nll
from .mapper import MapperNet
from .seq2seq import Seq2SeqModel

_EPS = 1e-9

Tokens = Sequence[str] | Sequence[int]


@dataclass
class EvalReport:
    bleu: dict[int, float]  # n -> percentage
    distinct: dict[int, float]  # n -> percentage
    entropy4: float  # nats
    ppl: float
    n_hypotheses: int
    n_references: int

    def to_dict(self) -> dict:
        return {
            "bleu": {str(n): v for n, v in self.bleu.items()},
            "distinct": {str(n): v for n, v in self.distinct.items()},
            "entropy4": self.entropy4,
            "ppl": self.ppl,
            "n_hypotheses": self.n_hypotheses,
            "n_references": self.n_references,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def ngrams(tokens: Tokens, n: int) -> list[tuple]:
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def bleu_n(
    hyps: Sequence[Tokens], refs: Sequence[Sequence[Tokens]], n: int
) -> float:
    """Corpus BLEU-n as a percentage in [0, 100]."""
    if not hyps:
        raise ValueError("empty hypothesis list")
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses vs {len(refs)} reference sets")
    if any(not rset for rset in refs):
        raise ValueError("every reference set must be nonempty")

    clipped = [0] * n
    total = [0] * n
    hyp_len = 0
    ref_len = 0
    for hyp, rset in zip(hyps, refs):
        hyp_len += len(hyp)
        # closest reference length; ties go to the shorter reference
        ref_len += min((abs(len(r) - len(hyp)), len(r)) for r in rset)[1]
        for k in range(1, n + 1):
            counts = Counter(ngrams(hyp, k))
            max_ref: Counter = Counter()
            for r in rset:
                for g, c in Counter(ngrams(r, k)).items():
                    max_ref[g] = max(max_ref[g], c)
            total[k - 1] += sum(counts.values())
            clipped[k - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())

    log_precisions = []
    for k in range(n):
        if total[k] == 0:
            p = _EPS
        else:
            p = clipped[k] / total[k]
            if p == 0.0:
                p = _EPS
        log_precisions.append(math.log(p))
    geo = math.exp(sum(log_precisions) / n)
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / max(hyp_len, 1))
    return 100.0 * bp * geo


def distinct_n(hyps: Sequence[Tokens], n: int) -> float:
    """100 * unique n-grams / total n-grams across all hypotheses."""
    if not hyps:
        raise ValueError("empty hypothesis list")
    grams = [g for hyp in hyps for g in ngrams(hyp, n)]
    if not grams:
        warnings.warn(f"no {n}-grams in any hypothesis; distinct-{n} = 0")
        return 0.0
    return 100.0 * len(set(grams)) / len(grams)


def entropy_n(hyps: Sequence[Tokens], n: int = 4) -> float:
    """Shannon entropy (nats) of the empirical n-gram distribution."""
    if not hyps:
        raise ValueError("empty hypothesis list")
    counts = Counter(g for hyp in hyps for g in ngrams(hyp, n))
    total = sum(counts.values())
    if total == 0:
        warnings.warn(f"no {n}-grams in any hypothesis; entropy-{n} = 0")
        return 0.0
    return -sum((c / total) * math.log(c / total) for c in counts.values())


def perplexity(
    model: Seq2SeqModel, mapper: MapperNet, corpus: Sequence[Dialogue]
) -> float:
    """exp(token-mean NLL) under the expectation-mixup teacher forward."""
    if not corpus:
        raise ValueError("empty corpus")
    return math.exp(corpus_nll(list(corpus), model, mapper))
