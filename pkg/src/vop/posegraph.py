"""Pose-graph construction experiment over retrieval rankings.

Edges are consumed in rank rounds: round r visits every query once (in a
shuffled order) and proposes the query's rank-r retrieval as an edge.
An edge between already-connected images is skipped without
verification; otherwise a pluggable verifier accepts or rejects it, and
accepted edges merge components in a union-find. The whole schedule is
repeated with reshuffled query orders and the component-count traces are
averaged on a normalized axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from zlib import crc32

import numpy as np

from .errors import ValidationError
from .io import atomic_write_text

SKIPPED = "skipped"
SUCCESS = "success"
FAILURE = "failure"


class UnionFind:
    """Disjoint sets with union by size and path compression."""

    def __init__(self, n: int):
        self.parent = list(range(n))
        self.size = [1] * n
        self.n_components = n

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]
        self.n_components -= 1
        return True

    def component_sizes(self) -> list[int]:
        return [self.size[i] for i in range(len(self.parent)) if self.find(i) == i]


# ---------------------------------------------------------------------------
# edge verifiers

def make_overlap_verifier(
    scores: dict,
    threshold: float,
    flip_probability: float = 0.0,
    seed: int = 0,
):
    """Verifier accepting edges whose ground-truth overlap reaches the
    threshold, with an optional chance of flipping the verdict.

    Flips are drawn from a per-edge hash of (seed, query id, db id), so
    the verifier stays deterministic no matter in which order or how
    often edges are checked. Scores are looked up symmetrically.
    """
    if not 0.0 <= flip_probability <= 1.0:
        raise ValidationError("flip_probability must lie in [0, 1]")

    def verify(query_id: str, db_id: str):
        score = scores.get((query_id, db_id))
        if score is None:
            score = scores.get((db_id, query_id), 0)
        ok = score >= threshold
        if flip_probability > 0.0:
            seq = np.random.SeedSequence(
                [seed, crc32(query_id.encode()), crc32(db_id.encode())]
            )
            if np.random.default_rng(seq).random() < flip_probability:
                ok = not ok
        return ok, int(score)

    return verify


def constant_verifier(verdict: bool):
    def verify(query_id: str, db_id: str):
        return verdict, 0

    return verify


# ---------------------------------------------------------------------------
# the experiment

@dataclass(frozen=True)
class PoseGraphRun:
    """One experiment: per-edge log of the first repetition, traces
    averaged across repetitions, and percentage stats.

    cc_trace holds the component count after each processed edge
    (skipped ones included; they are steps that change nothing).
    """

    n_images: int
    total_edges: int
    edges: list
    cc_trace: list
    mean_trace: np.ndarray
    std_trace: np.ndarray
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        prev = self.n_images
        for cc in self.cc_trace:
            if cc > prev or prev - cc > 1:
                raise ValidationError("component count must fall by 0 or 1 per step")
            prev = cc
        counts = {SKIPPED: 0, SUCCESS: 0, FAILURE: 0}
        for _, _, _, verdict in self.edges:
            counts[verdict] += 1
        if sum(counts.values()) != len(self.cc_trace):
            raise ValidationError("edge log and trace length disagree")


def _single_run(
    ranked: dict,
    query_order: list,
    node_of: dict,
    verifier,
    terminate_on_single_cc: bool,
):
    uf = UnionFind(len(node_of))
    edges = []
    trace = []
    max_rank = max((len(v) for v in ranked.values()), default=0)
    done = False
    for rank in range(max_rank):
        for query in query_order:
            hits = ranked[query]
            if rank >= len(hits):
                continue
            db = hits[rank]
            a, b = node_of[query], node_of[db]
            if uf.find(a) == uf.find(b):
                verdict = SKIPPED
            else:
                ok, _ = verifier(query, db)
                if ok:
                    uf.union(a, b)
                    verdict = SUCCESS
                else:
                    verdict = FAILURE
            edges.append((query, db, rank, verdict))
            trace.append(uf.n_components)
            if terminate_on_single_cc and uf.n_components == 1:
                done = True
                break
        if done:
            break
    return uf, edges, trace


def run_pose_graph(
    ranked: dict,
    verifier,
    shuffles: int,
    rng: np.random.Generator,
    image_ids: list | None = None,
    terminate_on_single_cc: bool = False,
) -> PoseGraphRun:
    """Run the rank-round edge schedule `shuffles` times.

    ranked maps each query id to its retrieval list, best first. The node
    set is image_ids when given (edges naming unknown ids are an error),
    otherwise every id seen in the rankings. Traces of repetitions that
    stop early hold their last value up to the common axis.
    """
    if not ranked or any(len(v) == 0 for v in ranked.values()):
        raise ValidationError("every query needs a non-empty ranked list")
    if shuffles < 1:
        raise ValidationError("need at least one repetition")
    seen = sorted(set(ranked) | {db for v in ranked.values() for db in v})
    if image_ids is None:
        nodes = seen
    else:
        nodes = list(image_ids)
        unknown = set(seen) - set(nodes)
        if unknown:
            raise ValidationError(f"edges reference unknown images: {sorted(unknown)}")
    node_of = {ident: i for i, ident in enumerate(nodes)}
    n_images = len(nodes)
    total_edges = sum(len(v) for v in ranked.values())
    queries = sorted(ranked)

    traces = np.empty((shuffles, total_edges))
    first_edges: list = []
    first_trace: list = []
    stat_rows = []
    for rep in range(shuffles):
        order = [queries[i] for i in rng.permutation(len(queries))]
        uf, edges, trace = _single_run(
            ranked, order, node_of, verifier, terminate_on_single_cc
        )
        if rep == 0:
            first_edges, first_trace = edges, trace
        padded = trace + [trace[-1]] * (total_edges - len(trace)) if trace else [n_images] * total_edges
        traces[rep] = padded
        n = len(edges)
        verdicts = [e[3] for e in edges]
        stat_rows.append(
            {
                "max_cc_size": max(uf.component_sizes()) / n_images * 100.0,
                "final_cc": uf.n_components / n_images * 100.0,
                "idx_last": n / total_edges * 100.0,
                SKIPPED: verdicts.count(SKIPPED) / n * 100.0,
                SUCCESS: verdicts.count(SUCCESS) / n * 100.0,
                FAILURE: verdicts.count(FAILURE) / n * 100.0,
            }
        )
    norm = traces / n_images
    stats = {
        key: float(np.mean([r[key] for r in stat_rows]))
        for key in stat_rows[0]
    }
    stats["n_images"] = n_images
    stats["total_edges"] = total_edges
    stats["shuffles"] = shuffles
    return PoseGraphRun(
        n_images=n_images,
        total_edges=total_edges,
        edges=first_edges,
        cc_trace=first_trace,
        mean_trace=norm.mean(axis=0),
        std_trace=norm.std(axis=0),
        stats=stats,
    )


def write_trace_csv(run: PoseGraphRun, path) -> None:
    lines = ["normalized_pairs_processed,normalized_cc_mean,normalized_cc_std"]
    for t in range(run.total_edges):
        lines.append(
            f"{(t + 1) / run.total_edges:.8f},"
            f"{run.mean_trace[t]:.8f},{run.std_trace[t]:.8f}"
        )
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_stats_json(run: PoseGraphRun, path) -> None:
    import json

    atomic_write_text(path, json.dumps(run.stats, indent=2, sort_keys=True) + "\n")
