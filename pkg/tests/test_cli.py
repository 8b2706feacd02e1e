import json
import shutil
import subprocess

import numpy as np
import pytest

from vop.cli import main
from vop.io import read_jsonl
from vop.synthetic import plane_scene, write_scene


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Full pipeline over a 4-camera strip: cameras 0-1-2 overlap their
    neighbors, camera 3 shares nothing with camera 0."""
    root = tmp_path_factory.mktemp("pipeline")
    scene = plane_scene(seed=31, nx=4, ny=1, feat_dim=32)
    manifest = write_scene(scene, root)

    paths = {
        "root": root,
        "manifest": manifest,
        "features": root / "features.vopf",
        "sup": root / "sup.jsonl",
        "head": root / "head.vopc",
        "loss": root / "loss.csv",
        "emb": root / "emb.vopf",
        "db": root / "db.vopf",
        "results": root / "results.jsonl",
        "metrics": root / "metrics.json",
        "recall_csv": root / "recall.csv",
        "trace": root / "trace.csv",
        "stats": root / "stats.json",
    }
    assert main(["supervise", str(manifest), "--out", str(paths["sup"]),
                 "--seed", "5"]) == 0
    assert main(["train",
                 "--features", str(paths["features"]),
                 "--supervision", str(paths["sup"]),
                 "--out", str(paths["head"]),
                 "--loss-log", str(paths["loss"]),
                 "--seed", "6", "--epochs", "2", "--batch-size", "4",
                 "--lr", "1e-3", "--dropout", "0.0",
                 "--layer-dims", "32,16,16", "--val-fraction", "0.0"]) == 0
    assert main(["embed", "--checkpoint", str(paths["head"]),
                 "--features", str(paths["features"]),
                 "--out", str(paths["emb"])]) == 0
    assert main(["index", "--embeddings", str(paths["emb"]),
                 "--out", str(paths["db"]), "--seed", "7"]) == 0
    assert main(["query", "--index", str(paths["db"]),
                 "--queries", str(paths["emb"]),
                 "--out", str(paths["results"]), "--top-k", "3"]) == 0
    assert main(["eval", "--results", str(paths["results"]),
                 "--gt", str(paths["sup"]),
                 "--out", str(paths["metrics"]),
                 "--csv", str(paths["recall_csv"]),
                 "--ks", "1,2", "--exclude-self"]) == 0
    assert main(["posegraph", "--results", str(paths["results"]),
                 "--gt", str(paths["sup"]),
                 "--out-trace", str(paths["trace"]),
                 "--out-stats", str(paths["stats"]),
                 "--seed", "8", "--shuffles", "3", "--threshold", "1"]) == 0
    return paths


def test_supervise_output_shape(pipeline):
    rows = read_jsonl(pipeline["sup"])
    assert len(rows) == 6  # all unordered pairs of 4 posed images
    by_pair = {(r["i"], r["j"]): r for r in rows}
    near = by_pair[("cam_0_0", "cam_0_1")]
    assert len(near["pos"]) == 160  # 6-tile shift: (16-6) * 16 shared tiles
    assert near["overlap_fraction"] == pytest.approx(160 / 256)
    far = by_pair[("cam_0_0", "cam_0_3")]
    assert far["pos"] == []
    assert len(near["neg_sampled"]) == 128


def test_supervise_is_byte_idempotent(pipeline):
    out2 = pipeline["root"] / "sup2.jsonl"
    assert main(["supervise", str(pipeline["manifest"]), "--out", str(out2),
                 "--seed", "5"]) == 0
    assert out2.read_bytes() == pipeline["sup"].read_bytes()


def test_train_wrote_checkpoint_and_log(pipeline):
    assert pipeline["head"].stat().st_size > 0
    lines = pipeline["loss"].read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss"
    assert len(lines) == 3


def test_query_is_byte_idempotent(pipeline):
    out2 = pipeline["root"] / "results2.jsonl"
    assert main(["query", "--index", str(pipeline["db"]),
                 "--queries", str(pipeline["emb"]),
                 "--out", str(out2), "--top-k", "3"]) == 0
    assert out2.read_bytes() == pipeline["results"].read_bytes()


def test_query_results_rank_self_first(pipeline):
    rows = read_jsonl(pipeline["results"])
    assert len(rows) == 4
    for row in rows:
        assert row["ranked"][0]["db"] == row["query"]
        scores = [r["score"] for r in row["ranked"]]
        assert scores == sorted(scores, reverse=True)


def test_eval_metrics_files(pipeline):
    metrics = json.loads(pipeline["metrics"].read_text())
    assert set(metrics["recall_at_k"]) == {"1", "2"}
    assert 0.0 <= metrics["recall_at_k"]["1"] <= 1.0
    lines = pipeline["recall_csv"].read_text().splitlines()
    assert lines[0] == "k,recall"
    assert len(lines) == 3


def test_posegraph_outputs(pipeline):
    stats = json.loads(pipeline["stats"].read_text())
    assert stats["n_images"] == 4
    assert stats["shuffles"] == 3
    lines = pipeline["trace"].read_text().splitlines()
    assert lines[0] == "normalized_pairs_processed,normalized_cc_mean,normalized_cc_std"
    assert len(lines) == 1 + stats["total_edges"]


def test_index_sidecar_holds_threshold(pipeline):
    meta = json.loads((pipeline["root"] / "db.vopf.json").read_text())
    assert meta["n_images"] == 4
    assert meta["n_patches"] == 256
    assert meta["n_d"] == 1024
    assert -1.0 <= meta["epsilon"] <= 1.0


def test_query_radius_resolution_order(pipeline):
    # explicit --radius beats everything; without radius or seed the
    # sidecar value is used; with neither available the command fails
    out = pipeline["root"] / "r_explicit.jsonl"
    assert main(["query", "--index", str(pipeline["db"]),
                 "--queries", str(pipeline["emb"]),
                 "--out", str(out), "--top-k", "1", "--radius", "0.9"]) == 0

    naked = pipeline["root"] / "naked.vopf"
    shutil.copy(pipeline["db"], naked)
    assert main(["query", "--index", str(naked),
                 "--queries", str(pipeline["emb"]),
                 "--out", str(out), "--top-k", "1"]) == 1
    assert main(["query", "--index", str(naked),
                 "--queries", str(pipeline["emb"]),
                 "--out", str(out), "--top-k", "1", "--seed", "3"]) == 0


def test_query_top_k_zero_writes_empty_rankings(pipeline):
    out = pipeline["root"] / "k0.jsonl"
    assert main(["query", "--index", str(pipeline["db"]),
                 "--queries", str(pipeline["emb"]),
                 "--out", str(out), "--top-k", "0"]) == 0
    rows = read_jsonl(out)
    assert all(row["ranked"] == [] for row in rows)


def test_config_file_defaults_and_flag_override(pipeline):
    cfg = pipeline["root"] / "cfg.json"
    cfg.write_text(json.dumps({"top_k": 1}))
    out = pipeline["root"] / "cfg_out.jsonl"
    assert main(["query", "--config", str(cfg),
                 "--index", str(pipeline["db"]),
                 "--queries", str(pipeline["emb"]),
                 "--out", str(out)]) == 0
    assert all(len(r["ranked"]) == 1 for r in read_jsonl(out))
    assert main(["query", "--config", str(cfg),
                 "--index", str(pipeline["db"]),
                 "--queries", str(pipeline["emb"]),
                 "--out", str(out), "--top-k", "2"]) == 0
    assert all(len(r["ranked"]) == 2 for r in read_jsonl(out))


# ---------------------------------------------------------------------------
# exit codes and diagnostics

def test_missing_seed_is_validation_failure(pipeline, capsys):
    code = main(["index", "--embeddings", str(pipeline["emb"]),
                 "--out", str(pipeline["root"] / "x.vopf")])
    assert code == 1
    err = capsys.readouterr().err.strip().splitlines()[-1]
    diag = json.loads(err)
    assert diag["level"] == "error"
    assert diag["error"] == "ValidationError"
    assert "seed" in diag["message"]


def test_missing_file_is_io_failure(pipeline):
    assert main(["embed", "--checkpoint", str(pipeline["root"] / "nope.vopc"),
                 "--features", str(pipeline["features"]),
                 "--out", str(pipeline["root"] / "x.vopf")]) == 2


def test_truncated_input_is_io_failure(pipeline):
    broken = pipeline["root"] / "broken.vopf"
    broken.write_bytes(pipeline["emb"].read_bytes()[:-20])
    assert main(["query", "--index", str(pipeline["db"]),
                 "--queries", str(broken),
                 "--out", str(pipeline["root"] / "x.jsonl"),
                 "--top-k", "1"]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_runaway_lr_is_numerical_failure(pipeline, capsys):
    code = main(["train",
                 "--features", str(pipeline["features"]),
                 "--supervision", str(pipeline["sup"]),
                 "--out", str(pipeline["root"] / "x.vopc"),
                 "--seed", "6", "--epochs", "3", "--batch-size", "4",
                 "--lr", "1e200", "--dropout", "0.0",
                 "--layer-dims", "32,16,16", "--val-fraction", "0.0"])
    assert code == 3
    diag = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert diag["error"] == "NumericalError"
    assert "pair" in diag["message"]


def test_unknown_weighting_is_validation_failure(pipeline):
    assert main(["query", "--index", str(pipeline["db"]),
                 "--queries", str(pipeline["emb"]),
                 "--out", str(pipeline["root"] / "x.jsonl"),
                 "--weights", "tfidf", "--top-k", "1"]) == 0


def test_diagnostics_are_json_lines(pipeline, capsys):
    main(["query", "--index", str(pipeline["db"]),
          "--queries", str(pipeline["emb"]),
          "--out", str(pipeline["root"] / "diag.jsonl"), "--top-k", "1"])
    for line in capsys.readouterr().err.strip().splitlines():
        obj = json.loads(line)
        assert "level" in obj


def test_console_entrypoint_exists():
    exe = shutil.which("vop")
    if exe is None:
        pytest.skip("console script not on PATH")
    out = subprocess.run([exe, "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    assert "supervise" in out.stdout
