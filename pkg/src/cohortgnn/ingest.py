"""Raw table loading, the feature-selection cascade, and PPI personalization.

The cascade is: variance filter (keep sample variance >= threshold), then
per-gene one-way ANOVA across label groups with Bonferroni adjustment over
the genes that entered the ANOVA stage (keep adjusted p < alpha).  All
operations are pure functions of their inputs and order-stable.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .core import ClinicalMatrix, LabelVector, OmicsMatrix, PpiScaffold
from .errors import (
    DegenerateGroups,
    EmptyGraph,
    EmptyResult,
    MissingColumn,
    NonFiniteValue,
    ParseError,
    UnmappedProtein,
)


@dataclass
class FeatureSelectionReport:
    """Outcome of the variance -> ANOVA -> Bonferroni cascade."""

    n_input_genes: int
    n_after_variance: int
    n_after_anova: int
    tested_genes: list
    pvalues_raw: np.ndarray
    pvalues_adjusted: np.ndarray
    kept_genes: list
    alpha: float
    imputed_cells: dict = field(default_factory=dict)

    def to_json(self, path):
        payload = {
            "n_input_genes": self.n_input_genes,
            "n_after_variance": self.n_after_variance,
            "n_after_anova": self.n_after_anova,
            "alpha": self.alpha,
            "kept_genes": list(self.kept_genes),
            "pvalues": {
                g: {"raw": float(r), "adjusted": float(a)}
                for g, r, a in zip(self.tested_genes, self.pvalues_raw, self.pvalues_adjusted)
            },
            "imputed_cells": self.imputed_cells,
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _read_table(path, delimiter):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh, delimiter=delimiter))
    if not rows:
        raise ParseError(f"{path}: empty file")
    return rows


def _parse_matrix(path, delimiter=",", impute=False):
    rows = _read_table(path, delimiter)
    header = rows[0]
    if len(header) < 2:
        raise MissingColumn(f"{path}: need an id column plus at least one value column")
    col_ids = tuple(header[1:])
    row_ids = []
    values = np.empty((len(rows) - 1, len(col_ids)))
    missing = []
    for r, row in enumerate(rows[1:], start=1):
        if len(row) != len(header):
            raise ParseError(f"{path}: row {r} has {len(row)} cells, expected {len(header)}")
        row_ids.append(row[0])
        for c, cell in enumerate(row[1:]):
            stripped = cell.strip()
            if stripped in ("", "NA", "NaN", "nan", "null"):
                values[r - 1, c] = np.nan
                missing.append((r - 1, c))
                continue
            try:
                values[r - 1, c] = float(stripped)
            except ValueError:
                raise ParseError(
                    f"{path}: unparseable cell {cell!r} at row {r}, column {header[c + 1]!r}"
                ) from None
            if not np.isfinite(values[r - 1, c]):
                missing.append((r - 1, c))

    imputed_counts = {}
    if missing:
        if not impute:
            r, c = missing[0]
            raise NonFiniteValue(
                f"{path}: missing/non-finite value at row {r + 1}, column {header[c + 1]!r}"
            )
        for c in range(values.shape[1]):
            col = values[:, c]
            mask = ~np.isfinite(col)
            if mask.any():
                finite = col[~mask]
                if finite.size == 0:
                    raise NonFiniteValue(f"{path}: column {header[c + 1]!r} has no finite values")
                col[mask] = np.median(finite)
                imputed_counts[col_ids[c]] = int(mask.sum())
    return tuple(row_ids), col_ids, values, imputed_counts


def load_omics(path, impute=False):
    patients, genes, values, imputed = _parse_matrix(path, impute=impute)
    omics = OmicsMatrix(patients=patients, genes=genes, values=values)
    return (omics, imputed) if impute else omics


def load_clinical(path, impute=False):
    patients, features, values, imputed = _parse_matrix(path, impute=impute)
    clin = ClinicalMatrix(patients=patients, features=features, values=values)
    return (clin, imputed) if impute else clin


def load_labels(path, label_set=None):
    rows = _read_table(path, ",")
    header = [h.strip().lower() for h in rows[0]]
    if "patient" not in header or "label" not in header:
        raise MissingColumn(f"{path}: expected 'patient' and 'label' columns")
    pi, li = header.index("patient"), header.index("label")
    patients, labels = [], []
    for row in rows[1:]:
        patients.append(row[pi])
        labels.append(row[li])
    if label_set is None:
        label_set = tuple(dict.fromkeys(labels))  # first-appearance order
        if len(label_set) < 2:
            raise ParseError(f"{path}: fewer than 2 distinct labels")
    return LabelVector(patients=tuple(patients), labels=tuple(labels), label_set=label_set)


def variance_filter(omics, threshold=0.1):
    """Keep genes whose unbiased sample variance (divisor n-1) is >= threshold."""
    if threshold < 0:
        raise ValueError("variance threshold must be >= 0")
    variances = omics.values.var(axis=0, ddof=1)
    keep = variances >= threshold
    if not keep.any():
        raise EmptyResult("variance filter dropped every gene")
    dropped = [g for g, k in zip(omics.genes, keep) if not k]
    filtered = OmicsMatrix(
        patients=omics.patients,
        genes=tuple(g for g, k in zip(omics.genes, keep) if k),
        values=omics.values[:, keep],
    )
    return filtered, dropped


def anova_pvalues(values, group_indices):
    """Vectorized per-column one-way ANOVA p-values.

    F = between-group mean square / within-group mean square, with numerator
    df = groups - 1 and denominator df = n - groups.  Columns with zero
    within-group variance get p = 0 when the group means differ and p = 1
    when every value is identical.
    """
    n, _ = values.shape
    groups = sorted(set(group_indices.tolist()))
    k = len(groups)
    grand = values.mean(axis=0)
    ss_between = np.zeros(values.shape[1])
    ss_within = np.zeros(values.shape[1])
    for g in groups:
        rows = values[group_indices == g]
        ng = rows.shape[0]
        if ng < 2:
            raise DegenerateGroups(f"label group {g} has {ng} member(s); need >= 2")
        gm = rows.mean(axis=0)
        ss_between += ng * (gm - grand) ** 2
        ss_within += ((rows - gm) ** 2).sum(axis=0)

    df_between = k - 1
    df_within = n - k
    ms_between = ss_between / df_between
    ms_within = ss_within / df_within

    pvals = np.ones(values.shape[1])
    regular = ms_within > 0
    f_stat = np.zeros_like(pvals)
    f_stat[regular] = ms_between[regular] / ms_within[regular]
    pvals[regular] = stats.f.sf(f_stat[regular], df_between, df_within)
    degenerate = ~regular
    pvals[degenerate] = np.where(ss_between[degenerate] > 0, 0.0, 1.0)
    return f_stat, pvals


def anova_filter(omics, labels, alpha=0.01):
    """Per-gene one-way ANOVA with Bonferroni adjustment; keep adjusted p < alpha.

    The Bonferroni denominator is the number of genes entering this stage.
    """
    order = {p: i for i, p in enumerate(omics.patients)}
    if set(labels.patients) != set(omics.patients):
        from .errors import MismatchedPatients

        raise MismatchedPatients("omics vs labels patient sets differ")
    lab_idx = np.empty(len(omics.patients), dtype=np.intp)
    all_idx = labels.as_indices()
    for p, li in zip(labels.patients, all_idx):
        lab_idx[order[p]] = li
    if len(set(lab_idx.tolist())) < 2:
        raise DegenerateGroups("need >= 2 label groups")

    _, raw = anova_pvalues(omics.values, lab_idx)
    m = len(omics.genes)
    adjusted = np.minimum(1.0, raw * m)
    keep = adjusted < alpha
    kept_genes = [g for g, k in zip(omics.genes, keep) if k]
    return FeatureSelectionReport(
        n_input_genes=m,
        n_after_variance=m,
        n_after_anova=len(kept_genes),
        tested_genes=list(omics.genes),
        pvalues_raw=raw,
        pvalues_adjusted=adjusted,
        kept_genes=kept_genes,
        alpha=alpha,
    )


def select_features(omics, labels, variance_threshold=0.1, alpha=0.01):
    """Full cascade: variance filter, then ANOVA/Bonferroni on the survivors."""
    filtered, _ = variance_filter(omics, variance_threshold)
    report = anova_filter(filtered, labels, alpha)
    report.n_input_genes = len(omics.genes)
    report.n_after_variance = len(filtered.genes)
    if not report.kept_genes:
        raise EmptyResult("feature selection kept no genes")
    keep = [g in set(report.kept_genes) for g in filtered.genes]
    selected = OmicsMatrix(
        patients=filtered.patients,
        genes=tuple(report.kept_genes),
        values=filtered.values[:, np.array(keep)],
    )
    return selected, report


def load_string_edges(path, confidence_threshold=0.7):
    """Parse a STRING-style TSV edge list into a filtered scaffold.

    Integer combined scores (0-999 convention) are divided by 1000; real
    scores in [0, 1] pass through.  Edges are kept iff confidence >=
    threshold; duplicate undirected pairs collapse to the max confidence and
    self-loops are removed.  Protein order is first appearance among kept
    edges.
    """
    rows = _read_table(path, "\t")
    start = 0
    # Optional header row: skip if the third column is not numeric.
    try:
        float(rows[0][2])
    except (ValueError, IndexError):
        start = 1

    best = {}
    order = []
    for r, row in enumerate(rows[start:], start=start + 1):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) < 3:
            raise ParseError(f"{path}: row {r} has {len(row)} columns, expected 3")
        a, b, raw = row[0].strip(), row[1].strip(), row[2].strip()
        try:
            score = float(raw)
        except ValueError:
            raise ParseError(f"{path}: unparseable score {raw!r} at row {r}") from None
        if score > 1.0:
            score /= 1000.0
        if not (0.0 <= score <= 1.0):
            raise ParseError(f"{path}: score {raw!r} at row {r} outside supported ranges")
        if a == b:
            continue
        if score < confidence_threshold:
            continue
        key = (a, b) if a <= b else (b, a)
        if key not in best:
            order.append(key)
            best[key] = score
        else:
            best[key] = max(best[key], score)

    if not best:
        raise EmptyGraph(f"{path}: no edges at confidence >= {confidence_threshold}")

    proteins = []
    index = {}
    for a, b in order:
        for p in (a, b):
            if p not in index:
                index[p] = len(proteins)
                proteins.append(p)
    edges = tuple((index[a], index[b], best[(a, b)]) for a, b in order)
    return PpiScaffold(proteins=tuple(proteins), edges=edges)


def load_gene_protein_map(path):
    """Two-column TSV/CSV: gene id, protein id.  Many-to-one is allowed."""
    delimiter = "\t" if str(path).endswith((".tsv", ".txt")) else ","
    rows = _read_table(path, delimiter)
    start = 1 if rows and rows[0][0].lower() in ("gene", "gene_id") else 0
    mapping = {}
    for row in rows[start:]:
        if len(row) < 2:
            raise ParseError(f"{path}: mapping rows need 2 columns")
        mapping[row[0].strip()] = row[1].strip()
    return mapping


def personalize(omics, scaffold, gene_to_protein=None):
    """Build one PatientPpiGraph per patient over the shared scaffold.

    Each protein's feature is the mean expression of its mapped genes
    (d = 1).  When ``gene_to_protein`` is None, genes map to the protein of
    the same identifier.  Proteins with no mapped gene are reported
    exhaustively.
    """
    from .core import PatientPpiGraph

    if gene_to_protein is None:
        gene_to_protein = {g: g for g in omics.genes}

    by_protein = {p: [] for p in scaffold.proteins}
    gene_index = {g: i for i, g in enumerate(omics.genes)}
    for gene, protein in gene_to_protein.items():
        if protein in by_protein and gene in gene_index:
            by_protein[protein].append(gene_index[gene])

    unmapped = [p for p, cols in by_protein.items() if not cols]
    if unmapped:
        raise UnmappedProtein(unmapped)

    features = np.column_stack(
        [omics.values[:, by_protein[p]].mean(axis=1) for p in scaffold.proteins]
    )
    return [
        PatientPpiGraph(patient=pid, scaffold=scaffold, node_features=features[i][:, None])
        for i, pid in enumerate(omics.patients)
    ]
