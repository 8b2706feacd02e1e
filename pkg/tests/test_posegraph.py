import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vop.errors import ValidationError
from vop.posegraph import (
    FAILURE,
    SKIPPED,
    SUCCESS,
    PoseGraphRun,
    UnionFind,
    constant_verifier,
    make_overlap_verifier,
    run_pose_graph,
    write_stats_json,
    write_trace_csv,
)


class NaiveSets:
    """Independent disjoint-set oracle: plain python set bookkeeping."""

    def __init__(self, n):
        self.sets = [{i} for i in range(n)]

    def _of(self, x):
        for s in self.sets:
            if x in s:
                return s
        raise KeyError(x)

    def connected(self, a, b):
        return self._of(a) is self._of(b)

    def union(self, a, b):
        sa, sb = self._of(a), self._of(b)
        if sa is sb:
            return False
        self.sets.remove(sb)
        sa |= sb
        return True

    @property
    def n_components(self):
        return len(self.sets)


@given(st.integers(min_value=0, max_value=2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_union_find_matches_naive_sets(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 30))
    uf = UnionFind(n)
    naive = NaiveSets(n)
    for _ in range(60):
        a, b = rng.integers(0, n, size=2)
        assert uf.union(int(a), int(b)) == naive.union(int(a), int(b))
        assert uf.n_components == naive.n_components
        c, d = rng.integers(0, n, size=2)
        assert (uf.find(int(c)) == uf.find(int(d))) == naive.connected(int(c), int(d))
    assert sorted(uf.component_sizes()) == sorted(len(s) for s in naive.sets)


def test_union_find_basics():
    uf = UnionFind(4)
    assert uf.n_components == 4
    assert uf.union(0, 1)
    assert not uf.union(1, 0)
    assert uf.union(2, 3)
    assert uf.union(0, 3)
    assert uf.n_components == 1
    assert uf.component_sizes() == [4]


# ---------------------------------------------------------------------------
# verifiers

def test_overlap_verifier_threshold_and_symmetry():
    scores = {("a", "b"): 10, ("b", "c"): 3}
    verify = make_overlap_verifier(scores, threshold=5)
    assert verify("a", "b") == (True, 10)
    assert verify("b", "a") == (True, 10)  # symmetric lookup
    assert verify("b", "c") == (False, 3)
    assert verify("a", "z") == (False, 0)  # unknown pair scores 0


def test_overlap_verifier_flips_are_deterministic_per_edge():
    scores = {(f"q{i}", f"d{i}"): 10 for i in range(200)}
    verify = make_overlap_verifier(scores, threshold=5, flip_probability=0.3, seed=7)
    first = [verify(f"q{i}", f"d{i}")[0] for i in range(200)]
    second = [verify(f"q{i}", f"d{i}")[0] for i in range(200)]
    assert first == second  # repeat calls agree: no hidden state
    flipped = first.count(False)
    assert 30 <= flipped <= 90  # about 30% of 200
    other = make_overlap_verifier(scores, threshold=5, flip_probability=0.3, seed=8)
    assert [other(f"q{i}", f"d{i}")[0] for i in range(200)] != first


def test_overlap_verifier_validation():
    with pytest.raises(ValidationError):
        make_overlap_verifier({}, 1, flip_probability=1.5)


# ---------------------------------------------------------------------------
# the schedule

def _chain_ranked(n):
    """images 0..n-1, each query retrieves its successor."""
    return {f"im{i}": [f"im{i + 1}"] for i in range(n - 1)}


def test_chain_collapses_to_one_component():
    run = run_pose_graph(_chain_ranked(8), constant_verifier(True), 3,
                         np.random.default_rng(0))
    assert run.n_images == 8
    assert run.stats["final_cc"] == pytest.approx(100.0 / 8)
    assert run.stats[SUCCESS] == 100.0
    assert run.stats[SKIPPED] == 0.0
    assert run.cc_trace[-1] == 1
    assert len(run.edges) == 7


def test_rejecting_verifier_never_merges():
    run = run_pose_graph(_chain_ranked(6), constant_verifier(False), 2,
                         np.random.default_rng(1))
    assert run.cc_trace == [6] * 5
    assert run.stats[FAILURE] == 100.0
    assert run.stats["final_cc"] == 100.0
    assert np.all(run.mean_trace == 1.0)
    assert np.all(run.std_trace == 0.0)


def test_duplicate_edges_are_skipped_without_verification():
    calls = []

    def counting_verifier(q, d):
        calls.append((q, d))
        return True, 0

    ranked = {"a": ["b", "b"], "b": ["a", "a"]}
    run = run_pose_graph(ranked, counting_verifier, 1, np.random.default_rng(2))
    # first merge verifies once; the other three proposals are skips
    assert len(calls) == 1
    verdicts = [e[3] for e in run.edges]
    assert verdicts.count(SUCCESS) == 1
    assert verdicts.count(SKIPPED) == 3
    assert run.cc_trace == [1, 1, 1, 1]


def test_rank_rounds_visit_rank0_before_rank1():
    ranked = {"a": ["b", "c"], "b": ["c", "a"]}
    run = run_pose_graph(ranked, constant_verifier(False), 1,
                         np.random.default_rng(3))
    ranks = [e[2] for e in run.edges]
    assert ranks == sorted(ranks)
    assert ranks == [0, 0, 1, 1]


def test_terminate_on_single_cc_stops_early():
    run = run_pose_graph(_chain_ranked(5), constant_verifier(True), 2,
                         np.random.default_rng(4), terminate_on_single_cc=True)
    assert run.cc_trace[-1] == 1
    assert run.stats["idx_last"] <= 100.0
    # padding holds the last value on the common axis
    assert run.mean_trace[-1] == pytest.approx(1.0 / 5)


def test_unknown_ids_rejected_when_node_set_given():
    with pytest.raises(ValidationError):
        run_pose_graph({"a": ["mystery"]}, constant_verifier(True), 1,
                       np.random.default_rng(5), image_ids=["a", "b"])


def test_isolated_images_count_as_components():
    run = run_pose_graph({"a": ["b"]}, constant_verifier(True), 1,
                         np.random.default_rng(6), image_ids=["a", "b", "c", "d"])
    assert run.n_images == 4
    assert run.cc_trace == [3]
    assert run.stats["max_cc_size"] == pytest.approx(50.0)


def test_empty_ranked_list_rejected():
    with pytest.raises(ValidationError):
        run_pose_graph({"a": []}, constant_verifier(True), 1, np.random.default_rng(7))
    with pytest.raises(ValidationError):
        run_pose_graph({}, constant_verifier(True), 1, np.random.default_rng(7))
    with pytest.raises(ValidationError):
        run_pose_graph(_chain_ranked(3), constant_verifier(True), 0,
                       np.random.default_rng(7))


@given(st.integers(min_value=0, max_value=2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_schedule_invariants_random_graphs(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 20))
    ids = [f"im{i}" for i in range(n)]
    ranked = {}
    for ident in ids:
        k = int(rng.integers(1, 4))
        others = [x for x in ids if x != ident]
        picks = rng.choice(len(others), size=min(k, len(others)), replace=False)
        ranked[ident] = [others[int(p)] for p in picks]
    scores = {}
    for q, hits in ranked.items():
        for d in hits:
            scores[(q, d)] = int(rng.integers(0, 10))
    verify = make_overlap_verifier(scores, threshold=5,
                                   flip_probability=0.2, seed=seed)
    run = run_pose_graph(ranked, verify, 3, rng, image_ids=ids)

    # component count: starts at n, never rises, falls by at most 1
    prev = n
    for cc in run.cc_trace:
        assert cc <= prev
        assert prev - cc <= 1
        prev = cc
    # success count equals total merges
    verdicts = [e[3] for e in run.edges]
    assert verdicts.count(SUCCESS) == n - run.cc_trace[-1]
    # stats are percentages on the right scales
    assert 0 < run.stats["max_cc_size"] <= 100.0
    assert 0 < run.stats["final_cc"] <= 100.0
    assert run.stats[SKIPPED] + run.stats[SUCCESS] + run.stats[FAILURE] == pytest.approx(100.0)
    # normalized traces live in (0, 1]
    assert np.all(run.mean_trace <= 1.0) and np.all(run.mean_trace > 0)
    assert run.mean_trace.shape == (run.total_edges,)
    # mean trace is non-increasing: every rep's trace is, and padding holds
    assert np.all(np.diff(run.mean_trace) <= 1e-12)


def test_same_rng_seed_reproduces_run():
    ranked = _chain_ranked(10)
    scores = {(f"im{i}", f"im{i + 1}"): i for i in range(9)}
    runs = []
    for _ in range(2):
        verify = make_overlap_verifier(scores, threshold=4, flip_probability=0.3, seed=3)
        runs.append(run_pose_graph(ranked, verify, 4, np.random.default_rng(11)))
    assert runs[0].edges == runs[1].edges
    assert np.array_equal(runs[0].mean_trace, runs[1].mean_trace)
    assert runs[0].stats == runs[1].stats


def test_run_validation_catches_bad_trace():
    with pytest.raises(ValidationError):
        PoseGraphRun(3, 2, [("a", "b", 0, SUCCESS)], [3, 1],
                     np.ones(2), np.zeros(2))


# ---------------------------------------------------------------------------
# outputs

def test_trace_csv_shape(tmp_path):
    run = run_pose_graph(_chain_ranked(4), constant_verifier(True), 2,
                         np.random.default_rng(8))
    path = tmp_path / "trace.csv"
    write_trace_csv(run, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "normalized_pairs_processed,normalized_cc_mean,normalized_cc_std"
    assert len(lines) == 1 + run.total_edges
    first = lines[1].split(",")
    assert float(first[0]) == pytest.approx(1 / run.total_edges)
    last = lines[-1].split(",")
    assert float(last[0]) == 1.0
    assert float(last[1]) == pytest.approx(1.0 / 4)


def test_stats_json_roundtrip(tmp_path):
    run = run_pose_graph(_chain_ranked(4), constant_verifier(True), 2,
                         np.random.default_rng(9))
    path = tmp_path / "stats.json"
    write_stats_json(run, path)
    stats = json.loads(path.read_text())
    assert stats["n_images"] == 4
    assert stats["shuffles"] == 2
    assert stats["success"] == 100.0
