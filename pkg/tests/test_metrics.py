import pytest

from vop.errors import ValidationError
from vop.metrics import RetrievalMetrics, compute_metrics


def _row(query, ranked_ids, scores=None, matches=None):
    scores = scores or list(range(len(ranked_ids), 0, -1))
    return {
        "query": query,
        "ranked": [
            {"db": d, "score": float(s), "matches": matches.get(d, []) if matches else []}
            for d, s in zip(ranked_ids, scores)
        ],
    }


def test_recall_at_k_by_hand():
    rows = [
        _row("q1", ["a", "b", "c"]),   # positive a at rank 1
        _row("q2", ["x", "b", "y"]),   # positive b at rank 2
        _row("q3", ["u", "v", "w"]),   # positive z never retrieved
    ]
    gt = {"q1": {"a"}, "q2": {"b"}, "q3": {"z"}}
    m = compute_metrics(rows, gt, ks=(1, 2, 3))
    assert m.recall_at_k[1] == pytest.approx(1 / 3)
    assert m.recall_at_k[2] == pytest.approx(2 / 3)
    assert m.recall_at_k[3] == pytest.approx(2 / 3)


def test_queries_without_positives_leave_the_denominator():
    rows = [_row("q1", ["a"]), _row("q2", ["b"])]
    gt = {"q1": {"a"}, "q2": set()}
    m = compute_metrics(rows, gt, ks=(1,))
    assert m.recall_at_k[1] == 1.0


def test_no_evaluable_query_is_an_error():
    rows = [_row("q1", ["a"])]
    with pytest.raises(ValidationError):
        compute_metrics(rows, {"q1": set()}, ks=(1,))


def test_exclude_self_drops_query_from_ranking_and_gt():
    rows = [_row("q1", ["q1", "a", "b"])]
    gt = {"q1": {"q1", "a"}}
    with_self = compute_metrics(rows, gt, ks=(1,))
    assert with_self.recall_at_k[1] == 1.0  # q1 counts itself
    without = compute_metrics(rows, gt, ks=(1,), exclude_self=True)
    assert without.recall_at_k[1] == 1.0  # a moves up to rank 1
    rows2 = [_row("q1", ["q1", "b", "a"])]
    without2 = compute_metrics(rows2, gt, ks=(1,), exclude_self=True)
    assert without2.recall_at_k[1] == 0.0


def test_margins_top1_minus_top2():
    rows = [_row("q1", ["a", "b"], scores=[5.0, 3.5]), _row("q2", ["c"], scores=[2.0])]
    m = compute_metrics(rows, {"q1": {"a"}, "q2": {"c"}}, ks=(1,))
    assert m.margins["q1"] == pytest.approx(1.5)
    assert m.margins["q2"] == pytest.approx(2.0)


def test_patch_metrics_on_top_ranked_image():
    matches = {"a": [[0, 0, 0.9], [1, 1, 0.8], [2, 5, 0.7]]}
    rows = [_row("q1", ["a", "b"], matches=matches)]
    gt = {"q1": {"a"}}
    truth = {("q1", "a"): {(0, 0), (1, 1), (3, 3)}}
    m = compute_metrics(rows, gt, ks=(1,), match_positives=truth)
    assert m.mean_patch_precision == pytest.approx(2 / 3)
    assert m.mean_patch_recall == pytest.approx(2 / 3)


def test_patch_metrics_skip_unlabeled_pairs():
    rows = [_row("q1", ["a"], matches={"a": [[0, 0, 0.9]]})]
    m = compute_metrics(rows, {"q1": {"a"}}, ks=(1,), match_positives={})
    assert m.mean_patch_precision is None
    assert m.mean_patch_recall is None


def test_metrics_validation():
    with pytest.raises(ValidationError):
        RetrievalMetrics({1: 0.9, 5: 0.5})  # recall fell with k
    with pytest.raises(ValidationError):
        RetrievalMetrics({1: 1.5})
    with pytest.raises(ValidationError):
        compute_metrics([_row("q", ["a"])], {"q": {"a"}}, ks=(0,))


def test_to_json_obj_is_sorted_and_stringly_keyed():
    m = RetrievalMetrics({5: 0.8, 1: 0.5}, margins={"b": 1.0, "a": 2.0})
    obj = m.to_json_obj()
    assert list(obj["recall_at_k"]) == ["1", "5"]
    assert list(obj["margins"]) == ["a", "b"]
