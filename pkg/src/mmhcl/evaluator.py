"""All-rank top-K evaluation, Recall/Precision/NDCG, and the cold-start protocol."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import interaction_matrix
from .linalg import ParameterError, SparseCsr
from .model import embed


@dataclass
class MetricsReport:
    k: int
    users_evaluated: int
    recall: float
    precision: float
    ndcg: float
    cold_recall: float | None = None
    cold_precision: float | None = None
    cold_ndcg: float | None = None
    cold_users_evaluated: int | None = None
    config_digest: str | None = None

    def to_json(self) -> dict:
        out = {
            "k": self.k,
            "users_evaluated": self.users_evaluated,
            "recall": self.recall,
            "precision": self.precision,
            "ndcg": self.ndcg,
        }
        if self.cold_recall is not None:
            out.update(cold_recall=self.cold_recall, cold_precision=self.cold_precision,
                       cold_ndcg=self.cold_ndcg, cold_users_evaluated=self.cold_users_evaluated)
        out["config_digest"] = self.config_digest
        return out


def _topk_row(row: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest finite entries, ties to the lower index."""
    finite = np.isfinite(row)
    k = min(k, int(finite.sum()))
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    v = np.partition(row, row.size - k)[row.size - k]
    gt = np.flatnonzero(row > v)
    eq = np.flatnonzero(row == v)[: k - len(gt)]
    cand = np.concatenate([gt, eq])
    return cand[np.lexsort((cand, -row[cand]))]


def rank_all(fused_u, fused_i, train_mask: SparseCsr | None, K: int, users=None,
             chunk_size: int = 512) -> list[np.ndarray]:
    """Top-``K`` item lists per user over all items, training items excluded."""
    if K < 1:
        raise ParameterError("K must be >= 1")
    fused_u = np.asarray(fused_u, dtype=np.float64)
    fused_i = np.asarray(fused_i, dtype=np.float64)
    K = min(K, len(fused_i))
    users = np.arange(len(fused_u)) if users is None else np.asarray(users, dtype=np.int64)
    out = []
    for lo in range(0, len(users), chunk_size):
        chunk = users[lo:lo + chunk_size]
        scores = fused_u[chunk] @ fused_i.T
        if train_mask is not None:
            for r, u in enumerate(chunk):
                cols, _ = train_mask.row(u)
                scores[r, cols] = -np.inf
        out.extend(_topk_row(scores[r], K) for r in range(len(chunk)))
    return out


def recall_at_k(topk, test_items, K: int) -> float:
    test = set(int(i) for i in test_items)
    hits = sum(1 for i in list(topk)[:K] if int(i) in test)
    return hits / len(test)


def precision_at_k(topk, test_items, K: int) -> float:
    test = set(int(i) for i in test_items)
    hits = sum(1 for i in list(topk)[:K] if int(i) in test)
    return hits / K


def ndcg_at_k(topk, test_items, K: int) -> float:
    test = set(int(i) for i in test_items)
    dcg = sum(1.0 / math.log2(r + 2) for r, i in enumerate(list(topk)[:K]) if int(i) in test)
    idcg = sum(1.0 / math.log2(r + 2) for r in range(min(len(test), K)))
    return dcg / idcg


def group_by_user(pairs, n_users: int) -> list[np.ndarray]:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    order = np.argsort(pairs[:, 0], kind="stable")
    bounds = np.searchsorted(pairs[order, 0], np.arange(n_users + 1))
    return [np.sort(pairs[order[bounds[u]:bounds[u + 1]], 1]) for u in range(n_users)]


def score_rankings(topk_by_user: dict, test_by_user: dict, K: int) -> tuple[float, float, float, int]:
    """Mean recall, precision, NDCG over users with a nonempty test set."""
    rec = prec = nd = 0.0
    n = 0
    for u, test in test_by_user.items():
        if len(test) == 0:
            continue
        top = topk_by_user[u]
        rec += recall_at_k(top, test, K)
        prec += precision_at_k(top, test, K)
        nd += ndcg_at_k(top, test, K)
        n += 1
    if n == 0:
        return 0.0, 0.0, 0.0, 0
    return rec / n, prec / n, nd / n, n


def evaluate_embeddings(fused_u, fused_i, train_pairs, test_pairs, K: int,
                        cold_test_pairs=None, config_digest=None) -> MetricsReport:
    n_users, n_items = len(fused_u), len(fused_i)
    mask = interaction_matrix(train_pairs, n_users, n_items)
    test = group_by_user(test_pairs, n_users)
    cold = group_by_user(cold_test_pairs, n_users) if cold_test_pairs is not None else None
    users = [u for u in range(n_users)
             if len(test[u]) or (cold is not None and len(cold[u]))]
    tops = dict(zip(users, rank_all(fused_u, fused_i, mask, K, users=users)))
    r, p, nd, n = score_rankings(tops, {u: test[u] for u in users}, K)
    report = MetricsReport(K, n, r, p, nd, config_digest=config_digest)
    if cold is not None:
        cr, cp, cn, cu = score_rankings(tops, {u: cold[u] for u in users}, K)
        report.cold_recall, report.cold_precision, report.cold_ndcg = cr, cp, cn
        report.cold_users_evaluated = cu
    return report


def evaluate_split(params, graphs, config, train_pairs, test_pairs, K: int = 20,
                   cold_test_pairs=None, config_digest=None) -> MetricsReport:
    fused_u, fused_i = embed(params, graphs, config)
    return evaluate_embeddings(fused_u, fused_i, train_pairs, test_pairs, K,
                               cold_test_pairs, config_digest)


def popularity_embeddings(train_pairs, n_users: int, n_items: int):
    """Rank-1 embeddings whose scores equal training popularity for every user."""
    counts = np.bincount(np.asarray(train_pairs, dtype=np.int64).reshape(-1, 2)[:, 1],
                         minlength=n_items).astype(np.float64)
    return np.ones((n_users, 1)), counts[:, None]


@dataclass
class ColdStartSplit:
    warm_pairs: np.ndarray
    cold_items: np.ndarray
    cold_pairs: np.ndarray


def make_cold_start_split(pairs, n_items: int, ratio: float, rng) -> ColdStartSplit:
    """Pick ``floor(ratio * n_items)`` items and move all their interactions out."""
    if not 0 < ratio < 1:
        raise ParameterError(f"cold-start ratio must lie in (0, 1), got {ratio}")
    rng = np.random.default_rng(rng)
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    n_cold = int(math.floor(ratio * n_items))
    cold = np.sort(rng.choice(n_items, size=n_cold, replace=False))
    is_cold = np.isin(pairs[:, 1], cold)
    return ColdStartSplit(pairs[~is_cold], cold, pairs[is_cold])
