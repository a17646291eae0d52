import numpy as np
import pytest

from cfdistill.data import InteractionData
from cfdistill.errors import DataError
from cfdistill.evaluation import (
    evaluate,
    ndcg_at_k,
    precision_at_k,
    rank_topk,
    recall_at_k,
    topk_from_scores,
)

from oracles import metrics_oracle, random_instance, topk_oracle


def make_data(train, val, test, n_items):
    n_users = len(train)
    arrays = lambda lists: [np.array(sorted(x), dtype=np.int64) for x in lists]
    return InteractionData(
        n_users=n_users,
        n_items=n_items,
        train=arrays(train),
        val=arrays(val),
        test=arrays(test),
        user_index_map={f"u{n}": n for n in range(n_users)},
        item_index_map={f"i{n}": n for n in range(n_items)},
    )


# ---------------------------------------------------------------------------
# topk selection
# ---------------------------------------------------------------------------


def test_topk_basic_order():
    items, truncated = topk_from_scores(np.array([0.1, 0.9, 0.5]), [], k=2)
    assert list(items) == [1, 2]
    assert not truncated


def test_topk_tie_breaks_by_index():
    items, _ = topk_from_scores(np.array([0.5, 0.7, 0.5, 0.7]), [], k=4)
    assert list(items) == [1, 3, 0, 2]


def test_topk_exclusion_and_truncation():
    items, truncated = topk_from_scores(np.array([0.1, 0.9, 0.5, 0.2]), [1, 2], k=3)
    assert list(items) == [3, 0]
    assert truncated


def test_topk_never_returns_excluded():
    rng = np.random.default_rng(0)
    for _ in range(100):
        scores = rng.standard_normal(30)
        exclude = set(map(int, rng.choice(30, size=rng.integers(0, 25), replace=False)))
        items, _ = topk_from_scores(scores, exclude, k=10)
        assert not (set(map(int, items)) & exclude)


def test_topk_constant_shift_invariance():
    rng = np.random.default_rng(1)
    scores = rng.standard_normal(25)
    base, _ = topk_from_scores(scores, [3, 4], k=7)
    shifted, _ = topk_from_scores(scores + 123.456, [3, 4], k=7)
    assert np.array_equal(base, shifted)


def test_topk_matches_oracle():
    rng = np.random.default_rng(2)
    for _ in range(200):
        scores = np.round(rng.standard_normal(20), 1)  # rounding forces ties
        exclude = set(map(int, rng.choice(20, size=rng.integers(0, 10), replace=False)))
        k = int(rng.integers(1, 15))
        items, _ = topk_from_scores(scores, exclude, k)
        assert list(items) == topk_oracle(scores, exclude, k)


def test_rank_topk_uses_id_scores_when_preferences_zero():
    rng = np.random.default_rng(3)
    params, features = random_instance(rng)
    for m in params.modalities:
        params.pref[m][:] = 0.0
    items, _ = rank_topk(params, features, user=1, k=5, exclude=[], keep=set(params.modalities))
    expected, _ = topk_from_scores(params.item_embed @ params.user_embed[1], [], 5)
    assert np.array_equal(items, expected)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def test_recall_cases():
    assert recall_at_k([1, 5, 9], {1, 2}) == 0.5
    assert recall_at_k([1, 2, 3], {1, 2}) == 1.0
    assert recall_at_k([5, 6], {1, 2}) == 0.0
    with pytest.raises(ValueError):
        recall_at_k([1], set())


def test_precision_cases():
    assert precision_at_k([1] + [0] * 19, {1}, k=20) == 0.05
    assert precision_at_k([5, 6], {1}, k=2) == 0.0
    assert precision_at_k([1, 2], {1, 2}, k=2) == 1.0


def test_ndcg_cases():
    assert ndcg_at_k([7, 1, 2], {7}, k=3) == 1.0
    assert ndcg_at_k([9, 7, 2], {7}, k=3) == pytest.approx(1.0 / np.log2(3.0), abs=1e-12)
    assert ndcg_at_k([9, 8], {7}, k=2) == 0.0


def test_metrics_match_bruteforce_oracle_on_fuzzed_rankings():
    rng = np.random.default_rng(4)
    for _ in range(500):
        n = int(rng.integers(5, 40))
        k = int(rng.integers(1, 25))
        ranking = list(rng.permutation(n)[: rng.integers(1, n + 1)])
        test_items = set(map(int, rng.choice(n, size=rng.integers(1, 6), replace=False)))
        expected = metrics_oracle(ranking, test_items, k)
        got = (
            recall_at_k(ranking[:k], test_items),
            ndcg_at_k(ranking, test_items, k),
            precision_at_k(ranking[:k], test_items, k),
        )
        assert got == pytest.approx(expected, abs=1e-12)


def test_metric_monotonicity_in_k():
    rng = np.random.default_rng(5)
    ranking = list(rng.permutation(30))
    test_items = set(map(int, rng.choice(30, size=5, replace=False)))
    recalls = [recall_at_k(ranking[:k], test_items) for k in range(1, 31)]
    ndcgs = [ndcg_at_k(ranking, test_items, k) for k in range(1, 31)]
    assert all(b >= a - 1e-12 for a, b in zip(recalls, recalls[1:]))
    assert all(b >= a - 1e-12 for a, b in zip(ndcgs, ndcgs[1:]))


def test_metric_bounds_fuzz():
    rng = np.random.default_rng(6)
    for _ in range(200):
        n = int(rng.integers(3, 30))
        ranking = list(rng.permutation(n))
        test_items = set(map(int, rng.choice(n, size=rng.integers(1, n), replace=False)))
        k = int(rng.integers(1, n + 1))
        for value in (
            recall_at_k(ranking[:k], test_items),
            ndcg_at_k(ranking, test_items, k),
            precision_at_k(ranking[:k], test_items, k),
        ):
            assert 0.0 <= value <= 1.0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def test_evaluate_perfect_single_user():
    rng = np.random.default_rng(7)
    params, features = random_instance(rng, n_users=1, n_items=6)
    data = make_data([[0, 1]], [[2]], [[3]], n_items=6)
    # force item 3 on top once train/val are excluded
    params.user_embed[0] = 0.0
    params.item_embed[:] = 0.0
    for m in params.modalities:
        params.pref[m][:] = 0.0
    params.user_embed[0, 0] = 1.0
    params.item_embed[3, 0] = 5.0
    report = evaluate(params, features, data, "test", k=2)
    for channel in report.per_channel.values():
        assert channel.recall == 1.0 and channel.ndcg == 1.0 and channel.precision == 0.5
    assert report.n_users_evaluated == 1


def test_evaluate_matches_per_user_oracle():
    rng = np.random.default_rng(8)
    params, features = random_instance(rng, n_users=6, n_items=15)
    train = [list(rng.choice(15, size=4, replace=False)) for _ in range(6)]
    val = [[int(np.setdiff1d(np.arange(15), t)[0])] for t in train]
    test = [[int(np.setdiff1d(np.arange(15), t + v)[0])] for t, v in zip(train, val)]
    data = make_data(train, val, test, n_items=15)
    k = 5
    report = evaluate(params, features, data, "test", k=k)
    for channel in ["full"] + params.modalities:
        keep = set(params.modalities) if channel == "full" else {channel}
        sums = np.zeros(3)
        for u in range(6):
            exclude = np.concatenate([data.train[u], data.val[u]])
            topk, _ = rank_topk(params, features, u, k, exclude, keep)
            sums += metrics_oracle(list(map(int, topk)), set(map(int, data.test[u])), k)
        expected = sums / 6
        got = report.per_channel[channel]
        assert (got.recall, got.ndcg, got.precision) == pytest.approx(tuple(expected), abs=1e-12)


def test_evaluate_full_channel_equals_keep_all():
    rng = np.random.default_rng(9)
    params, features = random_instance(rng, n_users=4, n_items=10)
    data = make_data(
        [[0, 1], [2, 3], [4, 5], [6, 7]],
        [[8], [8], [8], [8]],
        [[9], [9], [9], [9]],
        n_items=10,
    )
    report = evaluate(params, features, data, "val", k=3, channels=["full"])
    per_user = []
    for u in range(4):
        topk, _ = rank_topk(params, features, u, 3, data.train[u], set(params.modalities))
        per_user.append(recall_at_k(topk, set(map(int, data.val[u]))))
    assert report.per_channel["full"].recall == pytest.approx(float(np.mean(per_user)), abs=1e-15)


def test_evaluate_skips_users_with_empty_split():
    rng = np.random.default_rng(10)
    params, features = random_instance(rng, n_users=3, n_items=8)
    data = make_data([[0], [1], [2]], [[3], [4], [5]], [[6], [], [7]], n_items=8)
    report = evaluate(params, features, data, "test", k=2)
    assert report.n_users_evaluated == 2


def test_evaluate_errors_without_evaluable_users():
    rng = np.random.default_rng(11)
    params, features = random_instance(rng, n_users=2, n_items=6)
    data = make_data([[0], [1]], [[2], [3]], [[], []], n_items=6)
    with pytest.raises(DataError):
        evaluate(params, features, data, "test", k=2)


def test_evaluate_validates_split():
    rng = np.random.default_rng(12)
    params, features = random_instance(rng, n_users=2, n_items=6)
    data = make_data([[0], [1]], [[2], [3]], [[4], [5]], n_items=6)
    with pytest.raises(ValueError):
        evaluate(params, features, data, "train", k=2)


def test_report_serialization():
    rng = np.random.default_rng(13)
    params, features = random_instance(rng, n_users=2, n_items=8)
    data = make_data([[0], [1]], [[2], [3]], [[4], [5]], n_items=8)
    report = evaluate(params, features, data, "test", k=3)
    d = report.to_json_dict()
    assert d["k"] == 3 and set(d["channels"]) == {"full", "textual", "visual"}
    header, row = report.csv_header(), report.csv_row()
    assert len(header) == len(row)
    assert header[0] == "k" and row[0] == 3
