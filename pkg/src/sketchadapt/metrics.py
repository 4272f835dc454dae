"""Retrieval metrics: average precision over the full ranked list and P@K.

All functions take a binary relevance vector ordered by rank (best first).
A module-level counter tracks queries that had no relevant item at all,
which would otherwise silently contribute AP = 0.
"""

from __future__ import annotations

import warnings

import numpy as np

# Incremented whenever average_precision sees a query with zero relevant items.
zero_relevant_queries = 0


def average_precision(relevance) -> float:
    """AP = (1/R) * sum over relevant ranks k of precision@k, over the full list.

    ``relevance`` is a 0/1 vector in rank order. A query with no relevant
    item yields 0.0 and bumps ``zero_relevant_queries`` with a warning.
    """
    global zero_relevant_queries
    rel = np.asarray(relevance, dtype=np.float64)
    if rel.ndim != 1:
        raise ValueError("relevance must be a 1-D vector")
    total_relevant = rel.sum()
    if total_relevant == 0:
        zero_relevant_queries += 1
        warnings.warn("query with zero relevant items; AP defined as 0", stacklevel=2)
        return 0.0
    cum_hits = np.cumsum(rel)
    ranks = np.arange(1, rel.size + 1, dtype=np.float64)
    return float(np.sum(rel * cum_hits / ranks) / total_relevant)


def precision_at_k(relevance, k: int) -> float:
    """Fraction of relevant items in the top min(k, |G|) ranks."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    rel = np.asarray(relevance, dtype=np.float64)
    kk = min(int(k), rel.size)
    return float(rel[:kk].sum() / kk)


def mean_over_queries(values) -> float:
    """Arithmetic mean of per-query metric values."""
    vals = np.asarray(values, dtype=np.float64)
    if vals.size == 0:
        raise ValueError("no per-query values to average")
    return float(vals.mean())
