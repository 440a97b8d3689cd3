"""Command-line pipeline driver.

Commands compose through the on-disk cohort bundle: synth or external data
feeds preprocess, build-graph attaches the similarity graph, train fits and
checkpoints a model, evaluate/ablate produce metric JSON, explain and
cluster produce per-patient masks and subtype reports, and report renders
the JSON artifacts as text tables.  Every command drops a run_manifest.json
(config hash, seeds, input hashes, no timestamps) so identical runs are
byte-identical.
"""

from __future__ import annotations

import functools
import hashlib
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import click
import numpy as np

from . import __version__
from .core import assemble_hierarchy, flattened_stats, load_bundle, save_bundle
from .errors import ConfigError, DataError, NumericalError
from .explain import ExplainOptions, fidelity_eval, optimize_mask, save_explanations, load_explanations
from .gnn import ArchitectureConfig, ModelBundle
from .ingest import personalize, select_features
from .simgraph import SimilarityConfig, build_similarity_graph
from .subtype import save_cluster_outputs, subtype_report
from .synth import SynthConfig, complementary_signal_cohort, generate_cohort, save_ground_truth
from .train import (
    TrainConfig,
    cross_validate,
    predict_proba,
    prepare_cohort_data,
    run_ablation,
    stratified_kfold,
    train_model,
)

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


def _fail(code, exc):
    click.echo(f"error: {exc}", err=True)
    sys.exit(code)


def command_errors(fn):
    """Map the exception hierarchy onto distinct exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            _fail(EXIT_CONFIG, exc)
        except DataError as exc:
            _fail(EXIT_DATA, exc)
        except NumericalError as exc:
            _fail(EXIT_NUMERICAL, exc)

    return wrapper


def _load_config(path):
    if path is None:
        return {}
    with open(path) as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: run config must be a JSON object")
    return cfg


def _setting(config, key, flag_value, default):
    """Priority: explicit flag > config file > default."""
    if flag_value is not None:
        return flag_value
    return config.get(key, default)


def _hash_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _hash_inputs(paths):
    hashes = {}
    for p in paths:
        p = Path(p)
        if p.is_dir():
            for child in sorted(p.iterdir()):
                if child.is_file():
                    hashes[str(child)] = _hash_file(child)
        elif p.is_file():
            hashes[str(p)] = _hash_file(p)
    return hashes


def write_run_manifest(out_dir, command, settings, inputs=()):
    payload = {
        "command": command,
        "version": __version__,
        "settings": settings,
        "config_hash": hashlib.sha256(
            json.dumps(settings, sort_keys=True).encode()
        ).hexdigest(),
        "input_hashes": _hash_inputs(inputs),
    }
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "run_manifest.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _apply_threads(threads):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(threads)


def _arch_from(config, layer_kind=None, readout=None):
    arch_cfg = dict(config.get("architecture", {}))
    if layer_kind is not None:
        arch_cfg["layer_kind"] = layer_kind
    if readout is not None:
        arch_cfg["readout"] = readout
    known = set(ArchitectureConfig().to_dict())
    unknown = set(arch_cfg) - known
    if unknown:
        raise ConfigError(f"unknown architecture keys: {sorted(unknown)}")
    return ArchitectureConfig(**arch_cfg)


def _train_cfg_from(config, seed):
    t = config.get("training", {})
    return TrainConfig(
        lr=t.get("lr", 1e-2),
        max_epochs=t.get("max_epochs", 200),
        patience=t.get("patience", 20),
        val_fraction=t.get("val_fraction", 0.1),
        seed=seed,
    )


def _load_cohort_data(bundle_dir):
    """Bundle dir -> (CohortData, bundle dict).  Requires similarity.tsv."""
    bundle = load_bundle(bundle_dir)
    if bundle["similarity"] is None:
        raise DataError(f"{bundle_dir}: no similarity.tsv; run build-graph first")
    ppis = personalize(bundle["omics"], bundle["scaffold"])
    cohort = assemble_hierarchy(bundle["similarity"], ppis, bundle["labels"])
    return prepare_cohort_data(cohort, bundle["clinical"]), bundle, cohort


common_options = [
    click.option("--config", "config_path", type=click.Path(exists=True), default=None,
                 help="JSON run config; flags override it."),
    click.option("--seed", type=int, default=None),
    click.option("--threads", type=int, default=None),
    click.option("--out-dir", type=click.Path(), required=True),
]


def with_common(fn):
    for opt in reversed(common_options):
        fn = opt(fn)
    return command_errors(fn)


@click.group()
@click.version_option(__version__)
def main():
    """Hierarchical cohort GNN pipeline."""


@main.command()
@with_common
@click.option("--patients", type=int, default=None)
@click.option("--proteins", type=int, default=None)
@click.option("--edges", type=int, default=None)
@click.option("--classes", type=int, default=None)
@click.option("--complementary", is_flag=True, default=False,
              help="Four-class cohort with disjoint clinical/molecular signal routes.")
def synth(config_path, seed, threads, out_dir, patients, proteins, edges, classes, complementary):
    """Generate a synthetic cohort bundle with ground truth."""
    config = _load_config(config_path)
    _apply_threads(_setting(config, "threads", threads, 1))
    synth_cfg = dict(config.get("synth", {}))
    for key, value in (
        ("patients", patients), ("proteins", proteins), ("target_edges", edges),
        ("classes", classes), ("seed", _setting(config, "seed", seed, 0)),
    ):
        if value is not None:
            synth_cfg[key] = value
    cfg = SynthConfig(**synth_cfg)
    cohort = complementary_signal_cohort(cfg) if complementary else generate_cohort(cfg)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_bundle(
        out, cohort.omics, cohort.clinical, cohort.labels, cohort.scaffold,
        params={"synth": asdict(cfg), "complementary": complementary},
    )
    save_ground_truth(out / "ground_truth.json", cohort)
    write_run_manifest(out, "synth", {"synth": asdict(cfg), "complementary": complementary})
    click.echo(f"wrote cohort bundle to {out}")


@main.command()
@with_common
@click.option("--bundle", type=click.Path(exists=True), required=True)
@click.option("--variance-threshold", type=float, default=None)
@click.option("--alpha", type=float, default=None)
def preprocess(config_path, seed, threads, out_dir, bundle, variance_threshold, alpha):
    """Feature-select omics (variance, ANOVA, Bonferroni) into a new bundle."""
    config = _load_config(config_path)
    _apply_threads(_setting(config, "threads", threads, 1))
    vt = _setting(config, "variance_threshold", variance_threshold, 0.1)
    al = _setting(config, "alpha", alpha, 0.01)

    data = load_bundle(bundle)
    selected, report = select_features(data["omics"], data["labels"], vt, al)

    # Restrict the scaffold to proteins whose genes survived selection.
    kept = set(selected.genes)
    scaffold = data["scaffold"]
    keep_idx = [i for i, p in enumerate(scaffold.proteins) if p in kept]
    remap = {old: new for new, old in enumerate(keep_idx)}
    new_edges = tuple(
        (remap[a], remap[b], c)
        for a, b, c in scaffold.edges
        if a in remap and b in remap
    )
    from .core import PpiScaffold

    new_scaffold = PpiScaffold(
        proteins=tuple(scaffold.proteins[i] for i in keep_idx), edges=new_edges
    )

    out = Path(out_dir)
    save_bundle(
        out, selected, data["clinical"], data["labels"], new_scaffold,
        similarity=data["similarity"],
        params={"variance_threshold": vt, "alpha": al},
    )
    report.to_json(out / "feature_report.json")
    write_run_manifest(
        out, "preprocess", {"variance_threshold": vt, "alpha": al}, inputs=[bundle]
    )
    click.echo(
        f"kept {len(selected.genes)}/{report.n_input_genes} genes, "
        f"{new_scaffold.n_edges} scaffold edges"
    )


@main.command("build-graph")
@with_common
@click.option("--bundle", type=click.Path(exists=True), required=True)
@click.option("--k", type=int, default=None)
@click.option("--sigma", type=float, default=None)
def build_graph(config_path, seed, threads, out_dir, bundle, k, sigma):
    """Attach the kNN RBF patient-similarity graph to a bundle."""
    config = _load_config(config_path)
    _apply_threads(_setting(config, "threads", threads, 1))
    k_val = _setting(config, "k", k, 50)
    sigma_val = _setting(config, "sigma", sigma, "auto")

    data = load_bundle(bundle)
    sim_cfg = SimilarityConfig(k=k_val, sigma=sigma_val)
    graph = build_similarity_graph(data["clinical"], sim_cfg)

    out = Path(out_dir)
    save_bundle(
        out, data["omics"], data["clinical"], data["labels"], data["scaffold"],
        similarity=graph, params={"k": k_val, "sigma": str(sigma_val)},
    )
    write_run_manifest(out, "build-graph", {"k": k_val, "sigma": str(sigma_val)}, inputs=[bundle])
    click.echo(f"similarity graph: {graph.n_patients} patients, {graph.n_edges} edges")


@main.command()
@with_common
@click.option("--bundle", type=click.Path(exists=True), required=True)
@click.option("--layer-kind", type=click.Choice(["gcn", "gat", "sage"]), default=None)
@click.option("--readout", type=click.Choice(["max", "mean", "sum"]), default=None)
@click.option("--mode", type=click.Choice(["hierarchical", "sim_only", "ppi_only"]),
              default="hierarchical")
def train(config_path, seed, threads, out_dir, bundle, layer_kind, readout, mode):
    """Train on the full cohort and write model.bin + history.json."""
    config = _load_config(config_path)
    _apply_threads(_setting(config, "threads", threads, 1))
    seed_val = _setting(config, "seed", seed, 0)
    arch = _arch_from(config, layer_kind, readout)
    train_cfg = _train_cfg_from(config, seed_val)

    data, _, cohort = _load_cohort_data(bundle)
    model, history = train_model(
        data, arch, np.arange(len(data.y)), mode=mode, train_cfg=train_cfg
    )

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "model.bin")
    with open(out / "history.json", "w") as fh:
        json.dump(history, fh, indent=2, sort_keys=True)
        fh.write("\n")
    nodes, edges, avg = flattened_stats(cohort)
    settings = {"architecture": arch.to_dict(), "mode": mode, "seed": seed_val,
                "training": asdict(train_cfg)}
    write_run_manifest(out, "train", settings, inputs=[bundle])
    click.echo(
        f"trained {mode} model (best epoch {history['best_epoch']}); "
        f"flattened view: {nodes} nodes, {edges} edges, avg degree {avg:.3f}"
    )


@main.command()
@with_common
@click.option("--bundle", type=click.Path(exists=True), required=True)
@click.option("--layer-kind", type=click.Choice(["gcn", "gat", "sage"]), default=None)
@click.option("--readout", type=click.Choice(["max", "mean", "sum"]), default=None)
@click.option("--folds", type=int, default=None)
def evaluate(config_path, seed, threads, out_dir, bundle, layer_kind, readout, folds):
    """Stratified k-fold cross-validation; writes eval.json."""
    config = _load_config(config_path)
    _apply_threads(_setting(config, "threads", threads, 1))
    seed_val = _setting(config, "seed", seed, 0)
    n_folds = _setting(config, "folds", folds, 5)
    arch = _arch_from(config, layer_kind, readout)
    train_cfg = _train_cfg_from(config, seed_val)

    data, _, _ = _load_cohort_data(bundle)
    plan = stratified_kfold(data.y, n_folds, seed=seed_val)
    result = cross_validate(data, arch, plan, train_cfg=train_cfg)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = result.to_dict()
    payload["folds"] = n_folds
    payload["seed"] = seed_val
    with open(out / "eval.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    settings = {"architecture": arch.to_dict(), "folds": n_folds, "seed": seed_val}
    write_run_manifest(out, "evaluate", settings, inputs=[bundle])
    click.echo(_metric_table({"hierarchical": payload}))


@main.command()
@with_common
@click.option("--bundle", type=click.Path(exists=True), required=True)
@click.option("--layer-kind", type=click.Choice(["gcn", "gat", "sage"]), default=None)
@click.option("--readout", type=click.Choice(["max", "mean", "sum"]), default=None)
@click.option("--folds", type=int, default=None)
def ablate(config_path, seed, threads, out_dir, bundle, layer_kind, readout, folds):
    """Similarity-only, PPI-only, and full runs on identical folds."""
    config = _load_config(config_path)
    _apply_threads(_setting(config, "threads", threads, 1))
    seed_val = _setting(config, "seed", seed, 0)
    n_folds = _setting(config, "folds", folds, 5)
    arch = _arch_from(config, layer_kind, readout)
    train_cfg = _train_cfg_from(config, seed_val)

    data, _, _ = _load_cohort_data(bundle)
    plan = stratified_kfold(data.y, n_folds, seed=seed_val)
    results = run_ablation(data, arch, plan, train_cfg=train_cfg)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {name: r.to_dict() for name, r in results.items()}
    with open(out / "ablation.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    settings = {"architecture": arch.to_dict(), "folds": n_folds, "seed": seed_val}
    write_run_manifest(out, "ablate", settings, inputs=[bundle])
    click.echo(_metric_table(payload))


@main.command()
@with_common
@click.option("--bundle", type=click.Path(exists=True), required=True)
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--mask-edges", "mask_edges", type=int, default=None,
              help="Top-r edges kept when scoring fidelity.")
@click.option("--iterations", type=int, default=None)
def explain(config_path, seed, threads, out_dir, bundle, model_path, mask_edges, iterations):
    """Per-patient edge/feature masks against a frozen model."""
    config = _load_config(config_path)
    _apply_threads(_setting(config, "threads", threads, 1))
    r = _setting(config, "mask_edges", mask_edges, 10)
    iters = _setting(config, "explain_iterations", iterations, 100)

    data, _, _ = _load_cohort_data(bundle)
    model = ModelBundle.load(model_path)
    opts = ExplainOptions(iterations=iters)

    from .explain import _z_cache

    z_cache = _z_cache(model, data)
    masks = [
        optimize_mask(model, data, i, opts, z_cache=z_cache)
        for i in range(len(data.patients))
    ]
    curve = fidelity_eval(model, data, masks, [r], z_cache=z_cache)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_explanations(out / "explanations.jsonl", masks)
    with open(out / "fidelity.json", "w") as fh:
        json.dump({"r": r, "fidelity": curve[r]}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    settings = {"mask_edges": r, "iterations": iters}
    write_run_manifest(out, "explain", settings, inputs=[bundle, model_path])
    click.echo(f"explained {len(masks)} patients; fidelity@{r} = {curve[r]:.3f}")


@main.command()
@with_common
@click.option("--bundle", type=click.Path(exists=True), required=True)
@click.option("--explanations", type=click.Path(exists=True), required=True)
@click.option("--model", "model_path", type=click.Path(exists=True), default=None,
              help="If given, cluster by predicted labels; otherwise by true labels.")
@click.option("--kc", type=int, default=None, help="Clusters per subtype.")
def cluster(config_path, seed, threads, out_dir, bundle, explanations, model_path, kc):
    """t-SNE + k-means subtype clustering of explanation masks."""
    config = _load_config(config_path)
    _apply_threads(_setting(config, "threads", threads, 1))
    seed_val = _setting(config, "seed", seed, 0)
    kc_val = _setting(config, "kc", kc, 2)

    data, bundle_data, _ = _load_cohort_data(bundle)
    masks = load_explanations(explanations)
    if model_path is not None:
        model = ModelBundle.load(model_path)
        labels = predict_proba(model, data).argmax(axis=1)
    else:
        labels = data.y
    reports = subtype_report(
        list(data.patients), labels, list(data.classes), masks, kc=kc_val, seed=seed_val
    )

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_cluster_outputs(out / "clusters.json", out / "embedding.csv", reports)
    settings = {"kc": kc_val, "seed": seed_val, "predicted": model_path is not None}
    write_run_manifest(out, "cluster", settings, inputs=[bundle, explanations])
    for r in reports:
        note = " (no clear cluster structure)" if r.no_cluster_structure else ""
        click.echo(
            f"{r.subtype}: sizes {r.cluster_sizes}, silhouette {r.silhouette:.3f}{note}"
        )


def _metric_table(results):
    """Text table of mean +/- std AUC and F1 per evaluated configuration."""
    lines = [
        f"{'model':<16} {'AUC':>16} {'F1':>16}",
        "-" * 50,
    ]
    for name, r in results.items():
        auc = f"{r['mean_auc']:.3f} +/- {r['std_auc']:.3f}"
        f1 = f"{r['mean_f1']:.3f} +/- {r['std_f1']:.3f}"
        lines.append(f"{name:<16} {auc:>16} {f1:>16}")
    return "\n".join(lines)


def _cluster_table(reports):
    lines = []
    for r in reports:
        lines.append(f"subtype {r['subtype']}: silhouette {r['silhouette']:.3f}")
        for c, size in enumerate(r["cluster_sizes"]):
            lines.append(f"  cluster {c}: {size} patients")
        if r.get("top_differential_edges"):
            edges = ", ".join(f"e{d['edge']}" for d in r["top_differential_edges"][:5])
            lines.append(f"  top differential edges: {edges}")
    return "\n".join(lines)


@main.command()
@with_common
def report(config_path, seed, threads, out_dir):
    """Render eval/ablation/cluster JSON artifacts in --out-dir as text."""
    out = Path(out_dir)
    shown = False
    eval_path = out / "eval.json"
    if eval_path.exists():
        with open(eval_path) as fh:
            click.echo(_metric_table({"hierarchical": json.load(fh)}))
        shown = True
    ablation_path = out / "ablation.json"
    if ablation_path.exists():
        with open(ablation_path) as fh:
            click.echo(_metric_table(json.load(fh)))
        shown = True
    clusters_path = out / "clusters.json"
    if clusters_path.exists():
        with open(clusters_path) as fh:
            click.echo(_cluster_table(json.load(fh)))
        shown = True
    if not shown:
        raise DataError(f"{out}: no eval.json, ablation.json, or clusters.json found")


if __name__ == "__main__":
    main()
