"""Ranking metrics and the paired t-test.

A run maps query id -> ranked ``[(doc_id, score), ...]``; qrels map query id
-> ``{doc_id: graded relevance}``.  Queries are scored when the qrels judge
at least one document relevant (rel > 0); queries missing from the run score
0.  Run queries without judgements are ignored (see :func:`unjudged`).
"""

from __future__ import annotations

import math
from typing import Mapping, Sequence

import numpy as np
from scipy import special


def _judged(qrels) -> list[str]:
    return [q for q, docs in qrels.items() if any(r > 0 for r in docs.values())]


def unjudged(run, qrels) -> list[str]:
    judged = set(_judged(qrels))
    return [q for q in run if q not in judged]


def _docs(hits) -> list[str]:
    return [h[0] if isinstance(h, tuple) else h for h in hits]


def per_query_mrr(run, qrels, k: int = 10) -> dict[str, float]:
    if k < 1:
        raise ValueError("k must be >= 1")
    out = {}
    for q in _judged(qrels):
        rels = qrels[q]
        out[q] = 0.0
        for rank, d in enumerate(_docs(run.get(q, []))[:k], 1):
            if rels.get(d, 0) > 0:
                out[q] = 1.0 / rank
                break
    return out


def per_query_recall(run, qrels, k: int = 1000) -> dict[str, float]:
    out = {}
    for q in _judged(qrels):
        relevant = {d for d, r in qrels[q].items() if r > 0}
        got = set(_docs(run.get(q, []))[:k])
        out[q] = len(relevant & got) / len(relevant)
    return out


def dcg(gains: Sequence[float]) -> float:
    return sum((2.0**g - 1.0) / math.log2(i + 2) for i, g in enumerate(gains))


def per_query_ndcg(run, qrels, k: int = 10) -> dict[str, float]:
    """Exponential gain 2^rel - 1, discount 1/log2(rank + 1)."""
    out = {}
    for q, rels in qrels.items():
        ideal = dcg(sorted(rels.values(), reverse=True)[:k])
        if ideal <= 0:
            continue
        got = dcg([rels.get(d, 0) for d in _docs(run.get(q, []))[:k]])
        out[q] = got / ideal
    return out


def skipped_ndcg(qrels, k: int = 10) -> int:
    """Number of queries skipped by NDCG because their ideal DCG is 0."""
    return sum(1 for rels in qrels.values() if dcg(sorted(rels.values(), reverse=True)[:k]) <= 0)


def _mean(d: Mapping[str, float]) -> float:
    return float(np.mean(list(d.values()))) if d else 0.0


def mrr_at_k(run, qrels, k: int = 10) -> float:
    return _mean(per_query_mrr(run, qrels, k))


def recall_at_k(run, qrels, k: int = 1000) -> float:
    return _mean(per_query_recall(run, qrels, k))


def ndcg_at_k(run, qrels, k: int = 10) -> float:
    return _mean(per_query_ndcg(run, qrels, k))


def t_cdf(t: float, df: float) -> float:
    """Student t CDF via the regularized incomplete beta function."""
    x = df / (df + t * t)
    tail = 0.5 * special.betainc(df / 2.0, 0.5, x)
    return 1.0 - tail if t > 0 else tail


def paired_t_test(a, b) -> float:
    """Two-sided paired t-test p-value.

    ``a`` and ``b`` are per-query values, either aligned sequences or dicts
    keyed by query id (which must share their keys).  Identical inputs give
    p = 1; a constant nonzero difference gives p = 0.
    """
    if isinstance(a, Mapping):
        if set(a) != set(b):
            raise ValueError("paired_t_test: query sets differ")
        keys = sorted(a)
        a = [a[k] for k in keys]
        b = [b[k] for k in keys]
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    n = len(diff)
    if n < 2:
        raise ValueError("paired_t_test needs at least 2 pairs")
    mean = diff.mean()
    sd = diff.std(ddof=1)
    if sd == 0.0:
        return 1.0 if mean == 0.0 else 0.0
    t = mean / (sd / math.sqrt(n))
    return float(2.0 * t_cdf(-abs(t), n - 1))


def significant(p: float, alpha: float = 0.05) -> bool:
    return p <= alpha
