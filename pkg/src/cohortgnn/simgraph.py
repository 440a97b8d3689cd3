"""Patient-similarity graph: RBF kernel over clinical features + kNN sparsification.

Clinical features are z-scored before distances (configurable).  Each patient
keeps directed out-edges to its k most similar peers; ties break by ascending
patient index so the graph is deterministic.  A mutual-union symmetrization
flag exists for experimentation but the directed graph is the default, since
the P*k edge arithmetic only holds without symmetrization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import PatientSimilarityGraph
from .errors import DegenerateCohort, DimensionMismatch, KTooLarge, NonPositiveSigma


@dataclass
class SimilarityConfig:
    k: int = 50
    sigma: float | str = "auto"
    standardize: bool = True
    symmetrize: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise KTooLarge(f"k must be >= 1, got {self.k}")
        if self.sigma != "auto" and float(self.sigma) <= 0:
            raise NonPositiveSigma(f"sigma must be > 0, got {self.sigma}")


def rbf_similarity(ci, cj, sigma):
    """exp(-||ci - cj||^2 / (2 sigma^2))"""
    ci = np.asarray(ci, dtype=np.float64)
    cj = np.asarray(cj, dtype=np.float64)
    if ci.shape != cj.shape:
        raise DimensionMismatch(f"{ci.shape} vs {cj.shape}")
    if sigma <= 0:
        raise NonPositiveSigma(f"sigma must be > 0, got {sigma}")
    d2 = float(np.sum((ci - cj) ** 2))
    return float(np.exp(-d2 / (2.0 * sigma * sigma)))


def standardize(values):
    """Column z-score; constant columns become all-zero."""
    mean = values.mean(axis=0)
    std = values.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return (values - mean) / std


def _pairwise_distances(x):
    sq = (x * x).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d2, 0.0, out=d2)
    return np.sqrt(d2)


def auto_bandwidth(clinical):
    """Median of all pairwise Euclidean distances over standardized features."""
    values = np.asarray(clinical.values if hasattr(clinical, "values") else clinical)
    if values.shape[0] < 2:
        raise DegenerateCohort("need >= 2 patients for bandwidth estimation")
    x = standardize(values)
    dist = _pairwise_distances(x)
    iu = np.triu_indices(values.shape[0], k=1)
    med = float(np.median(dist[iu]))
    if med == 0.0:
        raise DegenerateCohort("all patients identical after standardization")
    return med


def build_similarity_graph(clinical, cfg):
    """kNN graph with RBF edge weights; exactly k out-edges per patient."""
    n = len(clinical.patients)
    if cfg.k >= n:
        raise KTooLarge(f"k={cfg.k} requires a cohort larger than {cfg.k} patients (got {n})")

    x = standardize(clinical.values) if cfg.standardize else np.asarray(
        clinical.values, dtype=np.float64
    )
    sigma = auto_bandwidth(clinical) if cfg.sigma == "auto" else float(cfg.sigma)
    dist = _pairwise_distances(x)
    sim = np.exp(-(dist**2) / (2.0 * sigma * sigma))

    edges = []
    chosen = set()
    idx = np.arange(n)
    for i in range(n):
        others = idx[idx != i]
        # Highest similarity first; ties broken by ascending patient index.
        order = others[np.lexsort((others, -sim[i, others]))]
        for j in order[: cfg.k]:
            edges.append((i, int(j)))
            chosen.add((i, int(j)))

    if cfg.symmetrize:
        for i, j in list(chosen):
            if (j, i) not in chosen:
                edges.append((j, i))
                chosen.add((j, i))

    patients = clinical.patients
    tiny = np.finfo(np.float64).tiny  # guard underflow to keep weights in (0, 1]
    edge_tuples = tuple(
        (patients[i], patients[j], float(max(sim[i, j], tiny))) for i, j in edges
    )
    return PatientSimilarityGraph(patients=patients, edges=edge_tuples, k=cfg.k)
