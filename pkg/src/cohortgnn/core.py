"""Shared data model: cohorts, graphs, labels, and the hierarchical assembly.

All types are plain frozen dataclasses validated on construction; they are
immutable after construction and safe to share across threads.  The on-disk
cohort bundle (scaffold.tsv / omics.csv / clinical.csv / labels.csv /
similarity.tsv / manifest.json) lives here too.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DataError,
    DuplicatePatient,
    MismatchedPatients,
    NonFiniteValue,
)

DEFAULT_LABEL_SET = ("None", "Generalized", "Intermediate", "Focal")


def _check_unique(ids, what):
    if len(set(ids)) != len(ids):
        seen, dupes = set(), []
        for x in ids:
            if x in seen:
                dupes.append(x)
            seen.add(x)
        raise DuplicatePatient(f"duplicate {what}: {sorted(set(dupes))}")


def _check_finite(values, what):
    if not np.isfinite(values).all():
        bad = np.argwhere(~np.isfinite(values))
        r, c = bad[0]
        raise NonFiniteValue(f"{what}: non-finite value at ({r}, {c})")


@dataclass(frozen=True)
class OmicsMatrix:
    patients: tuple
    genes: tuple
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "patients", tuple(self.patients))
        object.__setattr__(self, "genes", tuple(self.genes))
        vals = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", vals)
        if vals.shape != (len(self.patients), len(self.genes)):
            raise DataError(
                f"omics shape {vals.shape} != ({len(self.patients)}, {len(self.genes)})"
            )
        _check_unique(self.patients, "patient id")
        _check_unique(self.genes, "gene id")
        _check_finite(vals, "omics")


@dataclass(frozen=True)
class ClinicalMatrix:
    patients: tuple
    features: tuple
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "patients", tuple(self.patients))
        object.__setattr__(self, "features", tuple(self.features))
        vals = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", vals)
        if vals.shape != (len(self.patients), len(self.features)):
            raise DataError(
                f"clinical shape {vals.shape} != ({len(self.patients)}, {len(self.features)})"
            )
        _check_unique(self.patients, "patient id")
        _check_finite(vals, "clinical")


@dataclass(frozen=True)
class LabelVector:
    patients: tuple
    labels: tuple
    label_set: tuple = DEFAULT_LABEL_SET

    def __post_init__(self):
        object.__setattr__(self, "patients", tuple(self.patients))
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "label_set", tuple(self.label_set))
        if len(self.patients) != len(self.labels):
            raise DataError("labels: one label per patient required")
        _check_unique(self.patients, "patient id")
        if len(self.label_set) < 2:
            raise DataError("label set must contain at least 2 classes")
        unknown = set(self.labels) - set(self.label_set)
        if unknown:
            raise DataError(f"labels outside label set: {sorted(unknown)}")

    def as_indices(self):
        lookup = {lab: i for i, lab in enumerate(self.label_set)}
        return np.array([lookup[lab] for lab in self.labels], dtype=np.intp)


@dataclass(frozen=True)
class PpiScaffold:
    """Shared filtered interaction graph: undirected, confidence-scored."""

    proteins: tuple
    edges: tuple  # (source index, target index, confidence)

    def __post_init__(self):
        object.__setattr__(self, "proteins", tuple(self.proteins))
        object.__setattr__(self, "edges", tuple(tuple(e) for e in self.edges))
        _check_unique(self.proteins, "protein id")
        n = len(self.proteins)
        seen = set()
        for s, t, c in self.edges:
            if not (0 <= s < n and 0 <= t < n):
                raise DataError(f"edge ({s}, {t}) out of range for {n} proteins")
            if s == t:
                raise DataError(f"self-loop on protein index {s}")
            key = (min(s, t), max(s, t))
            if key in seen:
                raise DataError(f"duplicate undirected pair {key}")
            seen.add(key)
            if not (0.0 <= c <= 1.0):
                raise DataError(f"confidence {c} outside [0, 1] on edge {key}")

    @property
    def n_proteins(self):
        return len(self.proteins)

    @property
    def n_edges(self):
        return len(self.edges)

    def edge_arrays(self):
        """Directed (src, dst, confidence) arrays with both orientations."""
        if not self.edges:
            return (np.empty(0, np.intp), np.empty(0, np.intp), np.empty(0))
        s, t, c = (np.array(x) for x in zip(*self.edges))
        src = np.concatenate([s, t]).astype(np.intp)
        dst = np.concatenate([t, s]).astype(np.intp)
        conf = np.concatenate([c, c]).astype(np.float64)
        return src, dst, conf


@dataclass(frozen=True)
class PatientPpiGraph:
    patient: str
    scaffold: PpiScaffold
    node_features: np.ndarray  # (|proteins| × d)

    def __post_init__(self):
        feats = np.asarray(self.node_features, dtype=np.float64)
        if feats.ndim == 1:
            feats = feats[:, None]
        object.__setattr__(self, "node_features", feats)
        if feats.shape[0] != self.scaffold.n_proteins or feats.shape[1] < 1:
            raise DataError(
                f"node features {feats.shape} inconsistent with "
                f"{self.scaffold.n_proteins} proteins"
            )
        _check_finite(feats, f"features of patient {self.patient}")


@dataclass(frozen=True)
class PatientSimilarityGraph:
    """Weighted directed kNN graph over patients."""

    patients: tuple
    edges: tuple  # (source id, target id, weight)
    k: int

    def __post_init__(self):
        object.__setattr__(self, "patients", tuple(self.patients))
        object.__setattr__(self, "edges", tuple(tuple(e) for e in self.edges))
        _check_unique(self.patients, "patient id")
        known = set(self.patients)
        for s, t, w in self.edges:
            if s not in known or t not in known:
                raise DataError(f"similarity edge ({s}, {t}) references unknown patient")
            if s == t:
                raise DataError(f"self-edge on patient {s}")
            if not (0.0 < w <= 1.0):
                raise DataError(f"similarity weight {w} outside (0, 1] on ({s}, {t})")

    @property
    def n_patients(self):
        return len(self.patients)

    @property
    def n_edges(self):
        return len(self.edges)

    def edge_arrays(self):
        """Directed (dst, src, weight) index arrays; dst aggregates from src."""
        index = {p: i for i, p in enumerate(self.patients)}
        if not self.edges:
            return (np.empty(0, np.intp), np.empty(0, np.intp), np.empty(0))
        dst = np.array([index[s] for s, _, _ in self.edges], dtype=np.intp)
        src = np.array([index[t] for _, t, _ in self.edges], dtype=np.intp)
        w = np.array([w for _, _, w in self.edges], dtype=np.float64)
        return dst, src, w


@dataclass(frozen=True)
class HierarchicalCohort:
    """Patient similarity graph whose nodes each carry a personalized PPI graph."""

    similarity: PatientSimilarityGraph
    ppi_graphs: tuple
    labels: LabelVector

    def __post_init__(self):
        object.__setattr__(self, "ppi_graphs", tuple(self.ppi_graphs))

    @property
    def patients(self):
        return self.similarity.patients

    @property
    def scaffold(self):
        return self.ppi_graphs[0].scaffold

    @property
    def n_patients(self):
        return self.similarity.n_patients

    def feature_tensor(self):
        """Node features of all patients stacked row-wise: (P·V, d)."""
        return np.concatenate([g.node_features for g in self.ppi_graphs], axis=0)


def assemble_hierarchy(sim, ppis, labels):
    """Align the similarity graph, per-patient PPI graphs, and labels into one cohort.

    Fails rather than silently reordering mismatched inputs: the three patient
    id sets must be identical, and PPI graphs / labels are reordered to the
    similarity graph's patient order only when the sets agree exactly.
    """
    ppis = list(ppis)
    ppi_ids = [g.patient for g in ppis]
    _check_unique(ppi_ids, "patient id (ppi graphs)")
    sim_set = set(sim.patients)
    diff = sim_set.symmetric_difference(ppi_ids)
    if diff:
        raise MismatchedPatients(f"similarity vs ppi graphs: {sorted(diff)}")
    diff = sim_set.symmetric_difference(labels.patients)
    if diff:
        raise MismatchedPatients(f"similarity vs labels: {sorted(diff)}")

    by_id = {g.patient: g for g in ppis}
    ordered_ppis = tuple(by_id[p] for p in sim.patients)
    lab_by_id = dict(zip(labels.patients, labels.labels))
    ordered_labels = LabelVector(
        patients=sim.patients,
        labels=tuple(lab_by_id[p] for p in sim.patients),
        label_set=labels.label_set,
    )
    scaffold = ordered_ppis[0].scaffold
    for g in ordered_ppis:
        if g.scaffold is not scaffold and g.scaffold != scaffold:
            raise DataError("all patient PPI graphs must share one scaffold")
    return HierarchicalCohort(similarity=sim, ppi_graphs=ordered_ppis, labels=ordered_labels)


def flattened_stats(cohort):
    """(node_count, edge_count, avg_degree) of the flattened hierarchy.

    Protein copies across patients are the nodes; similarity edges plus every
    patient's scaffold edges are the edges.  Average degree follows the
    |E|/|V| convention.  This is a reporting view only; the model always
    operates on the two-level structure.
    """
    p = cohort.n_patients
    v = cohort.scaffold.n_proteins
    node_count = p * v
    edge_count = cohort.similarity.n_edges + p * cohort.scaffold.n_edges
    return node_count, edge_count, edge_count / node_count


# --- on-disk cohort bundle -------------------------------------------------

BUNDLE_FILES = ("scaffold.tsv", "omics.csv", "clinical.csv", "labels.csv", "similarity.tsv")


def _write_matrix_csv(path, row_ids, col_ids, values, id_col):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([id_col, *col_ids])
        for rid, row in zip(row_ids, values):
            writer.writerow([rid, *(repr(float(x)) for x in row)])


def _content_hash(directory):
    h = hashlib.sha256()
    for name in BUNDLE_FILES:
        fp = Path(directory) / name
        if fp.exists():
            h.update(name.encode())
            h.update(fp.read_bytes())
    return h.hexdigest()


def save_bundle(directory, omics, clinical, labels, scaffold, similarity=None, params=None):
    """Write the documented cohort bundle plus manifest.json with a content hash."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    with open(directory / "scaffold.tsv", "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t")
        writer.writerow(["protein_a", "protein_b", "confidence"])
        for s, t, c in scaffold.edges:
            writer.writerow([scaffold.proteins[s], scaffold.proteins[t], repr(float(c))])

    _write_matrix_csv(directory / "omics.csv", omics.patients, omics.genes, omics.values, "patient")
    _write_matrix_csv(
        directory / "clinical.csv", clinical.patients, clinical.features, clinical.values, "patient"
    )

    with open(directory / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient", "label"])
        for p, lab in zip(labels.patients, labels.labels):
            writer.writerow([p, lab])

    if similarity is not None:
        with open(directory / "similarity.tsv", "w", newline="") as fh:
            writer = csv.writer(fh, delimiter="\t")
            writer.writerow(["src", "dst", "weight"])
            for s, t, w in similarity.edges:
                writer.writerow([s, t, f"{w:.9f}"])

    manifest = {
        "proteins": list(scaffold.proteins),
        "n_patients": len(omics.patients),
        "n_genes": len(omics.genes),
        "n_clinical_features": len(clinical.features),
        "n_proteins": scaffold.n_proteins,
        "n_scaffold_edges": scaffold.n_edges,
        "label_set": list(labels.label_set),
        "params": params or {},
        "content_hash": _content_hash(directory),
    }
    if similarity is not None:
        manifest["n_similarity_edges"] = similarity.n_edges
        manifest["k"] = similarity.k
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_bundle(directory):
    """Read a cohort bundle; similarity.tsv is optional.

    Returns a dict with omics, clinical, labels, scaffold, similarity (or
    None), and the manifest.
    """
    from .ingest import load_clinical, load_labels, load_omics

    directory = Path(directory)
    with open(directory / "manifest.json") as fh:
        manifest = json.load(fh)
    omics = load_omics(directory / "omics.csv")
    label_set = tuple(manifest.get("label_set", DEFAULT_LABEL_SET))
    clinical = load_clinical(directory / "clinical.csv")
    labels = load_labels(directory / "labels.csv", label_set=label_set)

    proteins = tuple(manifest["proteins"])
    index = {p: i for i, p in enumerate(proteins)}
    scaffold_edges = []
    with open(directory / "scaffold.tsv", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        next(reader)
        for a, b, c in reader:
            scaffold_edges.append((index[a], index[b], float(c)))
    scaffold = PpiScaffold(proteins=proteins, edges=tuple(scaffold_edges))

    similarity = None
    sim_path = directory / "similarity.tsv"
    if sim_path.exists():
        edges = []
        with open(sim_path, newline="") as fh:
            reader = csv.reader(fh, delimiter="\t")
            next(reader)
            for s, t, w in reader:
                edges.append((s, t, float(w)))
        similarity = PatientSimilarityGraph(
            patients=omics.patients, edges=tuple(edges), k=int(manifest.get("k", 0))
        )
    return {
        "omics": omics,
        "clinical": clinical,
        "labels": labels,
        "scaffold": scaffold,
        "similarity": similarity,
        "manifest": manifest,
    }
