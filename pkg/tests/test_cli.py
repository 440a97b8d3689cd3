import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from cohortgnn.cli import EXIT_CONFIG, EXIT_DATA, main

SYNTH_ARGS = [
    "synth", "--patients", "24", "--proteins", "40", "--edges", "90",
    "--classes", "2", "--seed", "0",
]

RUN_CFG = {
    "architecture": {
        "ppi_hidden": 8, "ppi_embed": 8, "cohort_hidden": 8, "dropout": 0.0,
    },
    "training": {"max_epochs": 15, "patience": 5},
    "synth": {
        "n_informative_genes": 4, "motif_size": 4, "delta_clinical": 2.0,
        "delta_molecular": 2.0,
    },
}


@pytest.fixture()
def runner():
    return CliRunner()


@pytest.fixture()
def workspace(tmp_path, runner):
    """Bundle with similarity graph plus a run config, ready for train/eval."""
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps(RUN_CFG))
    raw = tmp_path / "raw"
    r = runner.invoke(main, SYNTH_ARGS + ["--config", str(cfg), "--out-dir", str(raw)])
    assert r.exit_code == 0, r.output
    ready = tmp_path / "ready"
    r = runner.invoke(
        main,
        ["build-graph", "--bundle", str(raw), "--k", "4", "--sigma", "1.0",
         "--out-dir", str(ready)],
    )
    assert r.exit_code == 0, r.output
    return tmp_path, cfg, raw, ready


def test_synth_writes_bundle_and_ground_truth(workspace):
    _, _, raw, _ = workspace
    for name in ("omics.csv", "clinical.csv", "labels.csv", "scaffold.tsv",
                 "ground_truth.json", "run_manifest.json", "manifest.json"):
        assert (raw / name).exists(), name
    manifest = json.loads((raw / "run_manifest.json").read_text())
    assert manifest["command"] == "synth"
    assert "config_hash" in manifest


def test_synth_reruns_are_byte_identical(tmp_path, runner):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"synth": RUN_CFG["synth"]}))
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        r = runner.invoke(main, SYNTH_ARGS + ["--config", str(cfg), "--out-dir", str(out)])
        assert r.exit_code == 0, r.output
        outs.append(out)
    for f in sorted(p.name for p in outs[0].iterdir()):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes(), f


def test_train_evaluate_report(workspace, runner):
    tmp_path, cfg, _, ready = workspace
    model_dir = tmp_path / "model"
    r = runner.invoke(
        main,
        ["train", "--bundle", str(ready), "--config", str(cfg),
         "--out-dir", str(model_dir)],
    )
    assert r.exit_code == 0, r.output
    assert (model_dir / "model.bin").exists()
    assert (model_dir / "history.json").exists()
    assert "flattened view" in r.output

    eval_dir = tmp_path / "eval"
    r = runner.invoke(
        main,
        ["evaluate", "--bundle", str(ready), "--config", str(cfg),
         "--folds", "3", "--out-dir", str(eval_dir)],
    )
    assert r.exit_code == 0, r.output
    payload = json.loads((eval_dir / "eval.json").read_text())
    assert len(payload["fold_auc"]) == 3
    assert payload["folds"] == 3 and payload["seed"] == 0

    r = runner.invoke(main, ["report", "--out-dir", str(eval_dir)])
    assert r.exit_code == 0, r.output
    assert "AUC" in r.output and "hierarchical" in r.output


def test_explain_and_cluster(workspace, runner):
    tmp_path, cfg, _, ready = workspace
    model_dir = tmp_path / "model"
    r = runner.invoke(
        main,
        ["train", "--bundle", str(ready), "--config", str(cfg), "--mode", "ppi_only",
         "--out-dir", str(model_dir)],
    )
    assert r.exit_code == 0, r.output

    explain_dir = tmp_path / "explain"
    r = runner.invoke(
        main,
        ["explain", "--bundle", str(ready), "--model", str(model_dir / "model.bin"),
         "--iterations", "5", "--out-dir", str(explain_dir)],
    )
    assert r.exit_code == 0, r.output
    lines = (explain_dir / "explanations.jsonl").read_text().splitlines()
    assert len(lines) == 24
    assert "fidelity@10" in r.output

    cluster_dir = tmp_path / "cluster"
    r = runner.invoke(
        main,
        ["cluster", "--bundle", str(ready), "--explanations",
         str(explain_dir / "explanations.jsonl"), "--kc", "2",
         "--out-dir", str(cluster_dir)],
    )
    assert r.exit_code == 0, r.output
    clusters = json.loads((cluster_dir / "clusters.json").read_text())
    assert len(clusters) == 1  # class0 is excluded as the no-disease class
    assert (cluster_dir / "embedding.csv").read_text().startswith("patient,x,y,")

    r = runner.invoke(main, ["report", "--out-dir", str(cluster_dir)])
    assert r.exit_code == 0, r.output
    assert "silhouette" in r.output


def test_preprocess(workspace, runner):
    tmp_path, cfg, _, ready = workspace
    out = tmp_path / "selected"
    r = runner.invoke(
        main,
        ["preprocess", "--bundle", str(ready), "--variance-threshold", "0.05",
         "--alpha", "0.05", "--out-dir", str(out)],
    )
    assert r.exit_code == 0, r.output
    report = json.loads((out / "feature_report.json").read_text())
    assert report["n_after_anova"] >= 1
    assert set(json.loads((out / "manifest.json").read_text())["proteins"]) == set(
        report["kept_genes"]
    )


def test_exit_codes(tmp_path, runner):
    # config error: invalid synthesis parameters
    r = runner.invoke(main, ["synth", "--classes", "1", "--out-dir", str(tmp_path / "x")])
    assert r.exit_code == EXIT_CONFIG
    # config error: unknown architecture key in the run config
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"architecture": {"depth": 9}, "synth": RUN_CFG["synth"]}))
    ok_cfg = tmp_path / "ok.json"
    ok_cfg.write_text(json.dumps({"synth": RUN_CFG["synth"]}))
    raw = tmp_path / "raw"
    assert runner.invoke(
        main, SYNTH_ARGS + ["--config", str(ok_cfg), "--out-dir", str(raw)]
    ).exit_code == 0
    ready = tmp_path / "ready"
    assert runner.invoke(
        main, ["build-graph", "--bundle", str(raw), "--k", "4", "--out-dir", str(ready)]
    ).exit_code == 0
    r = runner.invoke(
        main, ["train", "--bundle", str(ready), "--config", str(cfg),
               "--out-dir", str(tmp_path / "m")],
    )
    assert r.exit_code == EXIT_CONFIG
    # data error: training a bundle with no similarity graph
    r = runner.invoke(
        main, ["train", "--bundle", str(raw), "--out-dir", str(tmp_path / "m2")]
    )
    assert r.exit_code == EXIT_DATA
    # data error: report over an empty directory
    empty = tmp_path / "empty"
    empty.mkdir()
    r = runner.invoke(main, ["report", "--out-dir", str(empty)])
    assert r.exit_code == EXIT_DATA
