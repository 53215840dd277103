"""MSE, AUC and nDCG@k on missing-at-random test ratings."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import DomainError, UndefinedMetricError

POSITIVE_THRESHOLD = 4.0


def mse(predictions, truths):
    p = np.asarray(predictions, dtype=np.float64).reshape(-1)
    t = np.asarray(truths, dtype=np.float64).reshape(-1)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape[0]} predictions, {t.shape[0]} truths")
    if p.size == 0:
        raise ValueError("mse of empty input")
    d = p - t
    return float(np.mean(d * d))


def auc(scores, labels):
    """P(random positive outscores random negative), ties counting one half."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    ranks = rankdata(s, method="average")
    u_stat = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u_stat / (n_pos * n_neg))


def _dcg(gains, k):
    g = gains[:k]
    return float(np.sum(g / np.log2(np.arange(2, len(g) + 2))))


def ndcg_at_k(users, items, scores, ratings, k):
    """Mean per-user nDCG@k with gain ``2**r - 1``.

    Items are ordered by descending score, ties broken by ascending item
    index; users whose ideal DCG is zero are skipped.
    """
    if k < 1:
        raise DomainError("k must be >= 1")
    users = np.asarray(users).reshape(-1)
    items = np.asarray(items).reshape(-1)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    ratings = np.asarray(ratings, dtype=np.float64).reshape(-1)
    order = np.lexsort((items, -scores, users))
    users, items, scores, ratings = users[order], items[order], scores[order], ratings[order]
    bounds = np.flatnonzero(np.diff(users)) + 1
    values = []
    for r in np.split(ratings, bounds):
        gains = np.power(2.0, r) - 1.0
        ideal = _dcg(np.sort(gains)[::-1], k)
        if ideal > 0:
            values.append(_dcg(gains, k) / ideal)
    if not values:
        raise UndefinedMetricError("no user has a positive ideal DCG")
    return float(np.mean(values))


@dataclass
class EvalResult:
    mse: float
    auc: float
    ndcg_at_k: dict = field(default_factory=dict)
    per_user_counts: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mse < 0 or not 0 <= self.auc <= 1:
            raise ValueError("metric outside its range")

    def metric(self, name):
        if name == "mse":
            return self.mse
        if name == "auc":
            return self.auc
        if name.startswith("ndcg@"):
            return self.ndcg_at_k[int(name[5:])]
        raise KeyError(name)

    def to_record(self):
        rec = {"mse": self.mse, "auc": self.auc}
        rec.update({f"ndcg@{k}": v for k, v in sorted(self.ndcg_at_k.items())})
        return rec


def evaluate(model, test, ks=(5, 10), threshold=POSITIVE_THRESHOLD, clamp=True):
    """Score ``model`` on a test :class:`RatingDataset`."""
    pred = model.predict_batch(test.users, test.items)
    if clamp:
        pred = np.clip(pred, *test.rating_scale)
    counts = np.bincount(test.users, minlength=test.num_users)
    return EvalResult(
        mse=mse(pred, test.ratings),
        auc=auc(pred, test.ratings >= threshold),
        ndcg_at_k={k: ndcg_at_k(test.users, test.items, pred, test.ratings, k) for k in ks},
        per_user_counts={"users": int((counts > 0).sum()), "max_items": int(counts.max())},
    )
