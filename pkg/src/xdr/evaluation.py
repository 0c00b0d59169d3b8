"""Top-k ranking metrics and the MMD domain-distance diagnostic."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .serialization import dumps_json

DEFAULT_K = (2, 5, 10, 20, 50, 100)
CSV_COLUMNS = [
    "model", "dataset", "split", "k", "precision", "recall", "f1", "ndcg",
    "users", "seed", "candidate_policy",
]


def rank_items(scores, k: int, exclude=()) -> list[int]:
    """Top-``k`` items by descending score, ties broken by ascending index."""
    scores = np.asarray(scores, dtype=float)
    idx = np.arange(scores.size)
    mask = np.ones(scores.size, dtype=bool)
    mask[list(exclude)] = False
    cand = idx[mask]
    order = np.lexsort((cand, -scores[cand]))
    return cand[order[:k]].tolist()


def f1_at_k(recommended: Sequence[int], relevant, k: int):
    """``(precision, recall, f1)`` of the first ``k`` recommendations.

    Returns ``None`` when ``relevant`` is empty: such users are skipped.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    relevant = set(relevant)
    if not relevant:
        return None
    hits = sum(1 for it in list(recommended)[:k] if it in relevant)
    p = hits / k
    r = hits / len(relevant)
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f1


def ndcg_at_k(recommended: Sequence[int], relevant, k: int):
    """Binary-relevance NDCG with ``DCG = sum rel_j / log2(j + 1)``.

    The ideal DCG places ``min(k, |relevant|)`` hits at the top. Returns ``None``
    for an empty relevant set.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    relevant = set(relevant)
    if not relevant:
        return None
    dcg = 0.0
    for j, it in enumerate(list(recommended)[:k], 1):
        if it in relevant:
            dcg += 1.0 / math.log2(j + 1)
    idcg = 0.0
    for j in range(1, min(k, len(relevant)) + 1):
        idcg += 1.0 / math.log2(j + 1)
    return dcg / idcg


@dataclass
class MetricsReport:
    """Per-k averages over evaluated users."""

    metrics: dict[int, dict[str, float]]
    users: int
    candidate_policy: str
    k_list: tuple[int, ...] = field(default=DEFAULT_K)

    def f1(self, k: int) -> float:
        return self.metrics[k]["f1"]

    def rows(self, model="", dataset="", split="", seed=None) -> list[dict]:
        return [
            {
                "model": model,
                "dataset": dataset,
                "split": split,
                "k": k,
                **{m: self.metrics[k][m] for m in ("precision", "recall", "f1", "ndcg")},
                "users": self.users,
                "seed": "" if seed is None else seed,
                "candidate_policy": self.candidate_policy,
            }
            for k in self.k_list
        ]

    def to_csv(self, **labels) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in self.rows(**labels):
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()

    def to_json(self, **labels) -> str:
        return dumps_json({"rows": self.rows(**labels), "users": self.users,
                           "candidate_policy": self.candidate_policy})


def _group(pairs: np.ndarray, n_users: int) -> list[np.ndarray]:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    pairs = pairs[order]
    bounds = np.searchsorted(pairs[:, 0], np.arange(n_users + 1))
    return [pairs[bounds[u]: bounds[u + 1], 1] for u in range(n_users)]


def evaluate(
    scorer: Callable[[np.ndarray], np.ndarray],
    relevant_pairs,
    n_users: int,
    n_items: int,
    exclude_pairs=None,
    k_list: Sequence[int] = DEFAULT_K,
    candidate_policy: str = "exclude_train",
    batch_size: int = 512,
) -> MetricsReport:
    """Average precision/recall/F1/NDCG@k over users with held-out positives.

    ``scorer(users)`` returns a ``(len(users), n_items)`` score matrix. With the
    ``exclude_train`` policy the items in ``exclude_pairs`` are removed from a
    user's candidates; ``rank_all`` ranks every item.
    """
    if candidate_policy not in ("exclude_train", "rank_all"):
        raise ValueError(f"unknown candidate policy {candidate_policy!r}")
    k_list = tuple(sorted(int(k) for k in k_list))
    kmax = k_list[-1]
    relevant = _group(relevant_pairs, n_users)
    excluded = (
        _group(exclude_pairs, n_users)
        if exclude_pairs is not None and candidate_policy == "exclude_train"
        else [np.zeros(0, dtype=np.int64)] * n_users
    )
    users = np.array([u for u in range(n_users) if len(relevant[u])], dtype=np.int64)
    if users.size == 0:
        raise ValueError("no user has relevant items in this split")
    per_k = {k: {"precision": [], "recall": [], "f1": [], "ndcg": []} for k in k_list}
    for start in range(0, users.size, batch_size):
        batch = users[start: start + batch_size]
        scores = np.array(scorer(batch), dtype=float)
        if scores.shape != (batch.size, n_items):
            raise ValueError(f"scorer returned shape {scores.shape}")
        n_cand = np.full(batch.size, n_items)
        for row, u in enumerate(batch):
            if len(excluded[u]):
                scores[row, excluded[u]] = -np.inf
                n_cand[row] -= len(np.unique(excluded[u]))
        # stable sort on the negated score keeps ascending item index among ties
        top = np.argsort(-scores, axis=1, kind="stable")[:, :kmax]
        for row, u in enumerate(batch):
            rec = top[row, : min(kmax, n_cand[row])].tolist()
            rel = relevant[u].tolist()
            for k in k_list:
                p, r, f = f1_at_k(rec, rel, k)
                bucket = per_k[k]
                bucket["precision"].append(p)
                bucket["recall"].append(r)
                bucket["f1"].append(f)
                bucket["ndcg"].append(ndcg_at_k(rec, rel, k))
    n = users.size
    metrics = {k: {m: math.fsum(v) / n for m, v in per_k[k].items()} for k in k_list}
    return MetricsReport(metrics, int(n), candidate_policy, k_list)


def median_bandwidth(X: np.ndarray, Y: np.ndarray) -> float:
    """Median pairwise Euclidean distance of the pooled sample."""
    d = pdist(np.vstack([X, Y]))
    d = d[d > 0]
    return float(np.median(d)) if d.size else 1.0


def mmd(X, Y, bandwidth="median") -> float:
    """Unbiased squared MMD with an RBF kernel ``exp(-|x-y|^2 / (2 s^2))``."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[1] != Y.shape[1]:
        raise ValueError(f"sample widths differ: {X.shape} vs {Y.shape}")
    n, m = len(X), len(Y)
    if n < 2 or m < 2:
        raise ValueError("each sample needs at least two rows")
    s = median_bandwidth(X, Y) if bandwidth == "median" else float(bandwidth)
    gamma = 1.0 / (2.0 * s * s)
    kxx = np.exp(-gamma * cdist(X, X, "sqeuclidean"))
    kyy = np.exp(-gamma * cdist(Y, Y, "sqeuclidean"))
    kxy = np.exp(-gamma * cdist(X, Y, "sqeuclidean"))
    xx = (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
    yy = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
    return float(xx + yy - 2.0 * kxy.mean())
