"""Radius-search backend benchmark: compiled traversal vs pure python vs
linear scan.

Times the candidate-generation + canonical-filter pipeline on unit
vectors. Low-dimensional databases are where the space-partition tree
can prune; past a few dozen dimensions the boxes stop excluding
anything and the linear scan wins, which is what the "auto" structure
heuristic encodes.

Run:  python3 benchmarks/bench_kernels.py [--entries N] [--queries N]
"""

import argparse
import importlib
import time

import numpy as np

from vop import _kernels_py, kernels
from vop.types import normalize_rows


def _bench(fn, queries, repeats=1):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = [fn(q) for q in queries]
        best = min(best, time.perf_counter() - t0)
    return best / len(queries), out


def run_case(entries, dim, epsilon, n_queries, rng, leaf_size=32):
    pts = normalize_rows(rng.normal(size=(entries, dim)))
    queries = list(normalize_rows(rng.normal(size=(n_queries, dim))))

    t0 = time.perf_counter()
    tree = kernels.kd_build(pts, leaf_size=leaf_size)
    build_s = time.perf_counter() - t0
    targs = (tree.lo, tree.hi, tree.left, tree.right, tree.start, tree.end, tree.perm)
    bound = epsilon - kernels.PRUNE_SLACK

    def linear(q):
        rows, _ = kernels.radius_rows(pts, q, epsilon)
        return rows

    def via(impl):
        def query(q):
            cand = np.sort(impl.kd_candidates(*targs, q, bound))
            sims = kernels.cosine_sims(pts[cand], q)
            return cand[sims >= epsilon]
        return query

    rows = [("linear scan", *_bench(linear, queries))]
    try:
        compiled = importlib.import_module("vop._kernels")
        rows.append(("tree (compiled)", *_bench(via(compiled), queries)))
    except ImportError:
        print("  compiled kernel not built; skipping")
    rows.append(("tree (python)", *_bench(via(_kernels_py), queries)))

    reference = rows[0][2]
    for _, out in [(r[0], r[2]) for r in rows[1:]]:
        for got, want in zip(out, reference):
            assert np.array_equal(got, want), "backends disagree"

    base = rows[0][1]
    hits = float(np.mean([len(r) for r in reference]))
    print(f"\n  {entries} entries, dim {dim}, eps {epsilon} "
          f"(~{hits:.0f} hits/query, build {build_s * 1e3:.0f} ms)")
    for name, per_query, _ in rows:
        print(f"    {name:<16} {per_query * 1e6:9.0f} us/query "
              f"({base / per_query:5.1f}x vs linear)")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--entries", type=int, default=100_000)
    ap.add_argument("--queries", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)

    print(f"active backend: {kernels.backend_name()}")
    # the regime the tree is for: low dim, selective radius
    run_case(args.entries, 8, 0.95, args.queries, rng)
    run_case(args.entries, 16, 0.9, args.queries, rng)
    # the regime it is not for: embedding-sized vectors
    run_case(min(args.entries, 20_000), 256, 0.9, args.queries, rng)


if __name__ == "__main__":
    main()
