import numpy as np
import pytest

from cohortgnn.core import ClinicalMatrix
from cohortgnn.errors import DegenerateCohort, DimensionMismatch, KTooLarge, NonPositiveSigma
from cohortgnn.simgraph import (
    SimilarityConfig,
    auto_bandwidth,
    build_similarity_graph,
    rbf_similarity,
    standardize,
)


def make_clinical(n=12, d=3, seed=0):
    rng = np.random.default_rng(seed)
    return ClinicalMatrix(
        patients=tuple(f"p{i}" for i in range(n)),
        features=tuple(f"f{j}" for j in range(d)),
        values=rng.normal(size=(n, d)),
    )


def test_rbf_similarity_values():
    assert rbf_similarity([0.0, 0.0], [0.0, 0.0], 1.0) == 1.0
    assert rbf_similarity([0.0], [2.0], 1.0) == pytest.approx(np.exp(-2.0))
    with pytest.raises(NonPositiveSigma):
        rbf_similarity([0.0], [1.0], 0.0)
    with pytest.raises(DimensionMismatch):
        rbf_similarity([0.0], [1.0, 2.0], 1.0)


def test_standardize_columns():
    x = np.array([[1.0, 5.0], [3.0, 5.0], [5.0, 5.0]])
    z = standardize(x)
    assert np.allclose(z.mean(axis=0), 0.0)
    assert np.allclose(z[:, 1], 0.0)  # constant column stays zero, not nan


def test_auto_bandwidth_is_median_distance():
    clin = make_clinical(n=6)
    x = standardize(clin.values)
    dists = [
        np.linalg.norm(x[i] - x[j]) for i in range(6) for j in range(i + 1, 6)
    ]
    assert auto_bandwidth(clin) == pytest.approx(np.median(dists))
    constant = ClinicalMatrix(
        patients=("a", "b"), features=("f",), values=np.ones((2, 1))
    )
    with pytest.raises(DegenerateCohort):
        auto_bandwidth(constant)


def test_knn_graph_degree_and_weights():
    clin = make_clinical(n=15)
    cfg = SimilarityConfig(k=4, sigma=1.0)
    graph = build_similarity_graph(clin, cfg)
    assert graph.n_edges == 15 * 4  # exactly k directed out-edges per patient
    out_deg = {}
    for a, b, w in graph.edges:
        out_deg[a] = out_deg.get(a, 0) + 1
        assert 0.0 < w <= 1.0
    assert set(out_deg.values()) == {4}


def test_knn_picks_true_nearest_neighbours():
    values = np.array([[0.0], [0.1], [0.2], [5.0]])
    clin = ClinicalMatrix(
        patients=("a", "b", "c", "far"), features=("f",), values=values
    )
    graph = build_similarity_graph(
        clin, SimilarityConfig(k=1, sigma=1.0, standardize=False)
    )
    nearest = {a: b for a, b, _ in graph.edges}
    assert nearest == {"a": "b", "b": "a", "c": "b", "far": "c"}


def test_knn_tie_break_by_index():
    values = np.array([[0.0], [1.0], [-1.0]])  # b and c equidistant from a
    clin = ClinicalMatrix(patients=("a", "b", "c"), features=("f",), values=values)
    graph = build_similarity_graph(
        clin, SimilarityConfig(k=1, sigma=1.0, standardize=False)
    )
    nearest = {a: b for a, b, _ in graph.edges}
    assert nearest["a"] == "b"  # lower patient index wins the tie


def test_symmetrize_adds_missing_reverse_edges():
    clin = make_clinical(n=10, seed=2)
    directed = build_similarity_graph(clin, SimilarityConfig(k=2, sigma=1.0))
    sym = build_similarity_graph(clin, SimilarityConfig(k=2, sigma=1.0, symmetrize=True))
    pairs = {(a, b) for a, b, _ in sym.edges}
    assert all((b, a) in pairs for a, b in pairs)
    assert sym.n_edges >= directed.n_edges


def test_k_too_large():
    clin = make_clinical(n=5)
    with pytest.raises(KTooLarge):
        build_similarity_graph(clin, SimilarityConfig(k=5, sigma=1.0))
    with pytest.raises(KTooLarge):
        SimilarityConfig(k=0)
    with pytest.raises(NonPositiveSigma):
        SimilarityConfig(k=3, sigma=-1.0)


def test_graph_is_deterministic():
    clin = make_clinical(n=20, seed=7)
    g1 = build_similarity_graph(clin, SimilarityConfig(k=5))
    g2 = build_similarity_graph(clin, SimilarityConfig(k=5))
    assert g1.edges == g2.edges
