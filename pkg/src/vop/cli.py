"""Command-line pipelines: supervise, train, embed, index, query, eval,
posegraph.

Conventions shared by every subcommand:

* outputs are written atomically and are byte-identical across reruns
  with the same inputs and seed;
* --config points to a JSON file of defaults, explicit flags win;
* commands that draw random numbers require a seed (flag or config);
* diagnostics go to stderr as JSON lines, one object per line;
* exit codes: 0 ok, 1 validation failure, 2 I/O failure, 3 numerical
  failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import geometry, index as idx, io as vio, metrics, posegraph
from .encoder import embed_image, load_head, save_head
from .errors import CorruptionError, NumericalError, ValidationError
from .training import LossConfig, TrainDataset, init_train_state, train, write_loss_log


def _diag(level: str, **fields) -> None:
    print(json.dumps({"level": level, **fields}, sort_keys=True), file=sys.stderr)


def _load_config(path):
    if path is None:
        return {}
    obj = json.loads(Path(path).read_text())
    if not isinstance(obj, dict):
        raise ValidationError("config file must hold a JSON object")
    return obj


def _pick(args, config, name, default=None):
    """Flag value if given, else config value, else default."""
    v = getattr(args, name, None)
    if v is not None:
        return v
    return config.get(name, default)


def _require_seed(args, config) -> int:
    seed = _pick(args, config, "seed")
    if seed is None:
        raise ValidationError("this command draws random numbers; pass --seed "
                              "or put \"seed\" in the config file")
    return int(seed)


# ---------------------------------------------------------------------------
# subcommands

def cmd_supervise(args) -> int:
    config = _load_config(args.config)
    seed = _require_seed(args, config)
    neg = int(_pick(args, config, "negatives_per_pair", 128))
    manifest = vio.read_manifest(args.manifest)
    rng = np.random.default_rng(seed)
    grid = manifest.grid
    depth_cache: dict = {}

    def depth_of(image):
        if image.image_id not in depth_cache:
            depth_cache[image.image_id] = image.load_depth()
        return depth_cache[image.image_id]

    rows = []
    for id_i, id_j in manifest.supervision_pairs():
        im_i, im_j = manifest.image(id_i), manifest.image(id_j)
        if im_i.camera is None or im_j.camera is None:
            raise ValidationError(f"pair ({id_i}, {id_j}) lacks camera poses")
        ms = geometry.build_supervision_depth(
            id_i, id_j, depth_of(im_i), depth_of(im_j),
            im_i.camera, im_j.camera, grid,
        )
        negs = geometry.sample_negatives(
            ms.positives, grid.n_patches, grid.n_patches, neg, rng
        )
        rows.append(geometry.match_set_to_row(ms.with_negatives(negs)))
    vio.write_jsonl(rows, args.out)
    _diag("info", command="supervise", pairs=len(rows), out=str(args.out))
    return 0


def _read_feature_files(paths) -> dict:
    feats = {}
    for path in paths:
        for rec in vio.read_features(path):
            feats[rec.image_id] = rec
    if not feats:
        raise ValidationError("no feature records found")
    return feats


def cmd_train(args) -> int:
    config = _load_config(args.config)
    seed = _require_seed(args, config)
    epochs = int(_pick(args, config, "epochs", 30))
    batch_size = int(_pick(args, config, "batch_size", 64))
    lr = float(_pick(args, config, "lr", 1e-4))
    dropout = float(_pick(args, config, "dropout", 0.1))
    val_fraction = float(_pick(args, config, "val_fraction", 0.2))
    augment = float(_pick(args, config, "augment", 0.0))
    dims_raw = _pick(args, config, "layer_dims", "1024,256,256,256")
    if isinstance(dims_raw, str):
        layer_dims = [int(d) for d in dims_raw.split(",")]
    else:
        layer_dims = [int(d) for d in dims_raw]

    features = _read_feature_files(args.features)
    records = [geometry.match_set_from_row(r) for r in vio.read_jsonl(args.supervision)]
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(records))
    n_val = int(round(val_fraction * len(records)))
    val_records = [records[i] for i in perm[:n_val]]
    train_records = [records[i] for i in perm[n_val:]]
    if not train_records:
        raise ValidationError("validation split swallowed every record")
    dataset = TrainDataset(train_records, features)
    val_dataset = TrainDataset(val_records, features) if val_records else None

    state = init_train_state(layer_dims, dropout, seed)
    state, log = train(
        state, dataset, epochs=epochs, batch_size=batch_size, lr=lr,
        cfg=LossConfig(), val_dataset=val_dataset, augment_strength=augment,
    )
    save_head(state.head, args.out)
    if args.loss_log:
        write_loss_log(log, args.loss_log)
    _diag("info", command="train", epochs=epochs,
          best_val=min(r["val_loss"] for r in log), out=str(args.out))
    return 0


def cmd_embed(args) -> int:
    config = _load_config(args.config)
    pool = int(_pick(args, config, "pool_factor", 1))
    head = load_head(args.checkpoint)
    out = []
    for path in args.features:
        for rec in vio.read_features(path):
            emb = embed_image(head, rec)
            if pool > 1:
                emb = idx.pool_patches(emb, pool)
            out.append(emb)
    vio.write_embeddings(out, args.out)
    _diag("info", command="embed", images=len(out), out=str(args.out))
    return 0


def cmd_index(args) -> int:
    config = _load_config(args.config)
    seed = _require_seed(args, config)
    structure = _pick(args, config, "structure", "auto")
    db = vio.read_embeddings(args.embeddings)
    built = idx.build_index(db, structure=structure)
    rng = np.random.default_rng(seed)
    eps = idx.calibrate_radius(db, db, rng).epsilon
    idx.save_index(built, db, args.out, epsilon=eps)
    _diag("info", command="index", images=built.n_images,
          entries=built.entries.shape[0], epsilon=eps, out=str(args.out))
    return 0


def cmd_query(args) -> int:
    config = _load_config(args.config)
    k = int(_pick(args, config, "top_k", 5))
    mode = _pick(args, config, "mode", "hard")
    shortlist = int(_pick(args, config, "shortlist", idx.DEFAULT_SHORTLIST))
    weights = _pick(args, config, "weights", "tfidf")
    if weights not in ("tfidf", "uniform"):
        raise ValidationError(f"unknown weighting {weights!r}")
    db, built, stored_eps = idx.load_index(args.index,
                                           structure=_pick(args, config, "structure", "auto"))
    queries = vio.read_embeddings(args.queries)
    if args.radius is not None:
        eps = float(args.radius)
    elif _pick(args, config, "seed") is not None:
        rng = np.random.default_rng(_require_seed(args, config))
        eps = idx.calibrate_radius(queries, db, rng).epsilon
    elif stored_eps is not None:
        eps = stored_eps
    else:
        raise ValidationError("no radius available: pass --radius, or --seed to "
                              "calibrate, or index with a stored threshold")
    rows = []
    for q in queries:
        ranked = idx.retrieve_topk(
            q, built, k, eps, mode=mode, weighted=weights == "tfidf",
            use_prefilter=not args.no_prefilter, shortlist_size=shortlist,
        )
        rows.append(idx.results_to_rows(q.image_id, ranked))
    vio.write_jsonl(rows, args.out)
    _diag("info", command="query", queries=len(rows), epsilon=eps, out=str(args.out))
    return 0


def _gt_from_supervision(rows, min_positives: int):
    positives: dict = {}
    match_positives: dict = {}
    for row in rows:
        i, j, pos = row["i"], row["j"], row["pos"]
        match_positives[(i, j)] = [(p, q) for p, q in pos]
        match_positives[(j, i)] = [(q, p) for p, q in pos]
        if len(pos) >= min_positives:
            positives.setdefault(i, set()).add(j)
            positives.setdefault(j, set()).add(i)
    return positives, match_positives


def cmd_eval(args) -> int:
    config = _load_config(args.config)
    ks = [int(x) for x in str(_pick(args, config, "ks", "1,5,10")).split(",")]
    min_pos = int(_pick(args, config, "min_positives", 1))
    results = vio.read_jsonl(args.results)
    gt_rows = vio.read_jsonl(args.gt)
    positives, match_positives = _gt_from_supervision(gt_rows, min_pos)
    m = metrics.compute_metrics(
        results, positives, ks=ks, match_positives=match_positives,
        exclude_self=args.exclude_self,
    )
    vio.atomic_write_text(args.out, json.dumps(m.to_json_obj(), indent=2, sort_keys=True) + "\n")
    if args.csv:
        lines = ["k,recall"] + [f"{k},{m.recall_at_k[k]:.8f}" for k in sorted(m.recall_at_k)]
        vio.atomic_write_text(args.csv, "\n".join(lines) + "\n")
    _diag("info", command="eval", recall=m.to_json_obj()["recall_at_k"], out=str(args.out))
    return 0


def cmd_posegraph(args) -> int:
    config = _load_config(args.config)
    seed = _require_seed(args, config)
    shuffles = int(_pick(args, config, "shuffles", 100))
    threshold = float(_pick(args, config, "threshold", 1.0))
    flip = float(_pick(args, config, "flip_probability", 0.0))
    top_k = _pick(args, config, "top_k")
    results = vio.read_jsonl(args.results)
    ranked = {}
    for row in results:
        hits = [r["db"] for r in row["ranked"] if r["db"] != row["query"]]
        if top_k is not None:
            hits = hits[: int(top_k)]
        ranked[row["query"]] = hits
    verifier_kind = _pick(args, config, "verifier", "overlap")
    if verifier_kind == "overlap":
        gt_rows = vio.read_jsonl(args.gt) if args.gt else []
        if not gt_rows:
            raise ValidationError("the overlap verifier needs --gt supervision records")
        scores = {(r["i"], r["j"]): len(r["pos"]) for r in gt_rows}
        verifier = posegraph.make_overlap_verifier(scores, threshold, flip, seed)
    elif verifier_kind == "always":
        verifier = posegraph.constant_verifier(True)
    elif verifier_kind == "never":
        verifier = posegraph.constant_verifier(False)
    else:
        raise ValidationError(f"unknown verifier {verifier_kind!r}")
    run = posegraph.run_pose_graph(
        ranked, verifier, shuffles=shuffles, rng=np.random.default_rng(seed),
        terminate_on_single_cc=args.terminate_on_single_cc,
    )
    posegraph.write_trace_csv(run, args.out_trace)
    posegraph.write_stats_json(run, args.out_stats)
    _diag("info", command="posegraph", stats=run.stats)
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="vop",
        description="Patch-overlap image retrieval pipelines",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file with default parameter values")
        p.add_argument("--seed", type=int, help="seed for every random draw")

    p = sub.add_parser("supervise", help="patch match labels from posed depth")
    common(p)
    p.add_argument("manifest", help="dataset manifest JSON")
    p.add_argument("--out", required=True, help="output supervision JSONL")
    p.add_argument("--negatives-per-pair", dest="negatives_per_pair", type=int)
    p.set_defaults(func=cmd_supervise)

    p = sub.add_parser("train", help="train the embedding head")
    common(p)
    p.add_argument("--features", action="append", required=True, help="feature file (repeatable)")
    p.add_argument("--supervision", required=True, help="supervision JSONL")
    p.add_argument("--out", required=True, help="output checkpoint")
    p.add_argument("--loss-log", help="optional loss CSV")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--dropout", type=float)
    p.add_argument("--val-fraction", dest="val_fraction", type=float)
    p.add_argument("--augment", type=float)
    p.add_argument("--layer-dims", dest="layer_dims")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="features to embeddings with a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", action="append", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pool-factor", dest="pool_factor", type=int)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("index", help="build and persist a patch index")
    common(p)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--structure", choices=("auto", "linear", "tree"))
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("query", help="retrieve ranked matches from an index")
    common(p)
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True, help="query embeddings file")
    p.add_argument("--out", required=True, help="output retrieval JSONL")
    p.add_argument("--top-k", dest="top_k", type=int)
    p.add_argument("--mode", choices=("hard", "soft"))
    p.add_argument("--no-prefilter", action="store_true")
    p.add_argument("--shortlist", type=int)
    p.add_argument("--weights", choices=("tfidf", "uniform"))
    p.add_argument("--radius", type=float, help="override the similarity threshold")
    p.add_argument("--structure", choices=("auto", "linear", "tree"))
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", help="retrieval metrics against supervision GT")
    common(p)
    p.add_argument("--results", required=True, help="retrieval JSONL")
    p.add_argument("--gt", required=True, help="supervision JSONL")
    p.add_argument("--out", required=True, help="metrics JSON")
    p.add_argument("--csv", help="optional recall curve CSV")
    p.add_argument("--ks")
    p.add_argument("--min-positives", dest="min_positives", type=int)
    p.add_argument("--exclude-self", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("posegraph", help="connected-components experiment")
    common(p)
    p.add_argument("--results", required=True, help="retrieval JSONL")
    p.add_argument("--gt", help="supervision JSONL for the overlap verifier")
    p.add_argument("--out-trace", required=True, help="trace CSV")
    p.add_argument("--out-stats", required=True, help="stats JSON")
    p.add_argument("--verifier", choices=("overlap", "always", "never"))
    p.add_argument("--threshold", type=float)
    p.add_argument("--flip-probability", dest="flip_probability", type=float)
    p.add_argument("--shuffles", type=int)
    p.add_argument("--top-k", dest="top_k", type=int)
    p.add_argument("--terminate-on-single-cc", action="store_true")
    p.set_defaults(func=cmd_posegraph)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CorruptionError as exc:
        _diag("error", error=type(exc).__name__, message=str(exc))
        return 2
    except ValidationError as exc:
        _diag("error", error=type(exc).__name__, message=str(exc))
        return 1
    except NumericalError as exc:
        _diag("error", error=type(exc).__name__, message=str(exc))
        return 3
    except OSError as exc:
        _diag("error", error=type(exc).__name__, message=str(exc))
        return 2


if __name__ == "__main__":
    sys.exit(main())
