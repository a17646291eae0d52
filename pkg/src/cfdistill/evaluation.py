"""Top-K ranking evaluation.

Recall@K, NDCG@K and Precision@K averaged over users, computed for the full
model and for each uni-modal channel obtained by ablating the other
modalities at the input. Ranking is over all items minus the ones already
known for the user, ties broken by ascending item index so results are
stable across runs.
"""

from dataclasses import dataclass

import numpy as np

from .backbone import _as_keep, masked_offset
from .errors import DataError

METRIC_NAMES = ("recall", "ndcg", "precision")
FULL_CHANNEL = "full"


@dataclass
class ChannelMetrics:
    recall: float
    ndcg: float
    precision: float

    def as_dict(self) -> dict:
        return {"recall": self.recall, "ndcg": self.ndcg, "precision": self.precision}


@dataclass
class MetricsReport:
    k: int
    per_channel: dict
    n_users_evaluated: int

    def to_json_dict(self) -> dict:
        return {
            "k": self.k,
            "n_users_evaluated": self.n_users_evaluated,
            "channels": {ch: cm.as_dict() for ch, cm in sorted(self.per_channel.items())},
        }

    def csv_header(self) -> list:
        cols = ["k", "n_users_evaluated"]
        for ch in sorted(self.per_channel):
            cols.extend(f"{ch}_{metric}" for metric in METRIC_NAMES)
        return cols

    def csv_row(self) -> list:
        row = [self.k, self.n_users_evaluated]
        for ch in sorted(self.per_channel):
            cm = self.per_channel[ch]
            row.extend([cm.recall, cm.ndcg, cm.precision])
        return row


def topk_from_scores(scores: np.ndarray, exclude, k: int) -> tuple:
    """Highest-scoring k non-excluded items, ties by ascending index.

    Returns (items, truncated); truncated is True when fewer than k
    candidates were available, in which case all of them are returned.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = np.asarray(scores, dtype=np.float64).copy()
    exclude = np.asarray(sorted(exclude), dtype=np.int64) if len(exclude) else np.empty(0, dtype=np.int64)
    scores[exclude] = -np.inf
    candidates = scores.size - exclude.size
    order = np.lexsort((np.arange(scores.size), -scores))
    take = min(k, candidates)
    return order[:take], candidates < k


def channel_keep(params, channel: str):
    """Modality mask of a named channel ("full" keeps everything)."""
    if channel == FULL_CHANNEL:
        return frozenset(params.modalities)
    return _as_keep(params, {channel})


def channel_scores(params, features: dict, keep) -> np.ndarray:
    """Score matrix (n_users, n_items) under a modality mask."""
    keep = _as_keep(params, keep)
    scores = params.user_embed @ params.item_embed.T
    for m in params.modalities:
        if m in keep:
            scores = scores + params.pref[m] @ (features[m].matrix @ params.proj[m].T).T
    offset = masked_offset(params, features, keep)
    return scores + offset if offset else scores


def rank_topk(params, features: dict, user: int, k: int, exclude, keep) -> tuple:
    """Top-k recommendation list for one user under a modality mask."""
    if not 0 <= user < params.n_users:
        raise IndexError(f"user {user} out of range")
    keep = _as_keep(params, keep)
    scores = params.item_embed @ params.user_embed[user]
    for m in params.modalities:
        if m in keep:
            scores = scores + (features[m].matrix @ params.proj[m].T) @ params.pref[m][user]
    offset = masked_offset(params, features, keep)
    if offset:
        scores = scores + offset
    return topk_from_scores(scores, exclude, k)


def recall_at_k(topk, test_items) -> float:
    """|topk intersect test| / |test|."""
    test = set(int(i) for i in test_items)
    if not test:
        raise ValueError("recall undefined for an empty test set")
    hits = sum(1 for i in topk if int(i) in test)
    return hits / len(test)


def precision_at_k(topk, test_items, k: int) -> float:
    """|topk intersect test| / k, with k the requested cutoff."""
    test = set(int(i) for i in test_items)
    hits = sum(1 for i in topk if int(i) in test)
    return hits / k


def ndcg_at_k(topk, test_items, k: int) -> float:
    """Binary-relevance NDCG with the ideal DCG truncated at min(k, |test|)."""
    test = set(int(i) for i in test_items)
    if not test:
        raise ValueError("ndcg undefined for an empty test set")
    dcg = sum(1.0 / np.log2(r + 2) for r, item in enumerate(topk[:k]) if int(item) in test)
    idcg = sum(1.0 / np.log2(r + 2) for r in range(min(k, len(test))))
    return float(dcg / idcg)


def evaluate(params, features: dict, data, split: str, k: int = 20, channels=None) -> MetricsReport:
    """Averaged per-user metrics on a split, per channel.

    Validation ranking excludes the user's train items; test ranking
    excludes train and val items. Users with no items in the split are
    skipped, not zero-scored.
    """
    if split not in ("val", "test"):
        raise ValueError(f"split must be 'val' or 'test', got {split!r}")
    if channels is None:
        channels = [FULL_CHANNEL] + params.modalities
    target = data.split_lists(split)
    evaluable = [u for u in range(data.n_users) if len(target[u]) > 0]
    if not evaluable:
        raise DataError(f"no users have items in the {split} split")

    per_channel = {}
    for ch in channels:
        keep = channel_keep(params, ch)
        scores = channel_scores(params, features, keep)
        sums = np.zeros(3)
        for u in evaluable:
            exclude = data.train[u] if split == "val" else np.concatenate([data.train[u], data.val[u]])
            topk, _ = topk_from_scores(scores[u], exclude, k)
            sums += (
                recall_at_k(topk, target[u]),
                ndcg_at_k(topk, target[u], k),
                precision_at_k(topk, target[u], k),
            )
        mean = sums / len(evaluable)
        per_channel[ch] = ChannelMetrics(recall=float(mean[0]), ndcg=float(mean[1]), precision=float(mean[2]))
    return MetricsReport(k=k, per_channel=per_channel, n_users_evaluated=len(evaluable))
