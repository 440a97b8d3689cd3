import numpy as np
import pytest

from cohortgnn.core import (
    ClinicalMatrix,
    LabelVector,
    OmicsMatrix,
    PatientPpiGraph,
    PatientSimilarityGraph,
    PpiScaffold,
    assemble_hierarchy,
    flattened_stats,
    load_bundle,
    save_bundle,
)
from cohortgnn.errors import (
    DataError,
    DuplicatePatient,
    MismatchedPatients,
    NonFiniteValue,
)


def small_scaffold():
    return PpiScaffold(
        proteins=("A", "B", "C", "D"),
        edges=((0, 1, 0.9), (1, 2, 0.8), (2, 3, 0.75)),
    )


def test_omics_validation():
    with pytest.raises(DataError):
        OmicsMatrix(patients=("p1",), genes=("g1", "g2"), values=np.zeros((1, 3)))
    with pytest.raises(DuplicatePatient):
        OmicsMatrix(patients=("p1", "p1"), genes=("g1",), values=np.zeros((2, 1)))
    with pytest.raises(NonFiniteValue):
        OmicsMatrix(patients=("p1",), genes=("g1",), values=np.array([[np.nan]]))


def test_clinical_validation():
    with pytest.raises(NonFiniteValue):
        ClinicalMatrix(patients=("p1",), features=("f",), values=np.array([[np.inf]]))


def test_label_vector():
    lv = LabelVector(patients=("a", "b"), labels=("None", "Focal"))
    assert list(lv.as_indices()) == [0, 3]
    with pytest.raises(DataError):
        LabelVector(patients=("a",), labels=("Weird",))
    with pytest.raises(DataError):
        LabelVector(patients=("a",), labels=("x",), label_set=("x",))


def test_scaffold_rejects_bad_edges():
    with pytest.raises(DataError):
        PpiScaffold(proteins=("A", "B"), edges=((0, 0, 0.9),))
    with pytest.raises(DataError):
        PpiScaffold(proteins=("A", "B"), edges=((0, 1, 0.9), (1, 0, 0.8)))
    with pytest.raises(DataError):
        PpiScaffold(proteins=("A", "B"), edges=((0, 1, 1.5),))
    with pytest.raises(DataError):
        PpiScaffold(proteins=("A", "B"), edges=((0, 5, 0.9),))


def test_scaffold_edge_arrays_both_orientations():
    src, dst, conf = small_scaffold().edge_arrays()
    pairs = set(zip(src.tolist(), dst.tolist()))
    assert (0, 1) in pairs and (1, 0) in pairs
    assert len(src) == 6 and len(conf) == 6


def test_similarity_graph_validation():
    with pytest.raises(DataError):
        PatientSimilarityGraph(patients=("a", "b"), edges=(("a", "a", 0.5),), k=1)
    with pytest.raises(DataError):
        PatientSimilarityGraph(patients=("a", "b"), edges=(("a", "b", 0.0),), k=1)
    with pytest.raises(DataError):
        PatientSimilarityGraph(patients=("a", "b"), edges=(("a", "z", 0.5),), k=1)


def test_patient_ppi_graph_feature_shape():
    sc = small_scaffold()
    g = PatientPpiGraph(patient="p", scaffold=sc, node_features=np.arange(4.0))
    assert g.node_features.shape == (4, 1)
    with pytest.raises(DataError):
        PatientPpiGraph(patient="p", scaffold=sc, node_features=np.zeros((3, 1)))


def make_cohort():
    sc = small_scaffold()
    patients = ("p1", "p2", "p3")
    sim = PatientSimilarityGraph(
        patients=patients,
        edges=(("p1", "p2", 0.5), ("p2", "p3", 0.4), ("p3", "p1", 0.3)),
        k=1,
    )
    rng = np.random.default_rng(0)
    ppis = [
        PatientPpiGraph(patient=p, scaffold=sc, node_features=rng.normal(size=(4, 1)))
        for p in patients
    ]
    labels = LabelVector(patients=patients, labels=("None", "Focal", "Focal"))
    return sim, ppis, labels


def test_assemble_hierarchy_reorders_to_similarity_order():
    sim, ppis, labels = make_cohort()
    cohort = assemble_hierarchy(sim, list(reversed(ppis)), labels)
    assert cohort.patients == sim.patients
    assert cohort.ppi_graphs[0].patient == "p1"
    assert cohort.labels.labels == ("None", "Focal", "Focal")
    assert cohort.feature_tensor().shape == (12, 1)


def test_assemble_hierarchy_rejects_mismatch():
    sim, ppis, labels = make_cohort()
    with pytest.raises(MismatchedPatients):
        assemble_hierarchy(sim, ppis[:2], labels)
    bad_labels = LabelVector(patients=("p1", "p2", "zz"), labels=("None",) * 3)
    with pytest.raises(MismatchedPatients):
        assemble_hierarchy(sim, ppis, bad_labels)


def test_flattened_stats():
    sim, ppis, labels = make_cohort()
    cohort = assemble_hierarchy(sim, ppis, labels)
    nodes, edges, avg = flattened_stats(cohort)
    assert nodes == 3 * 4
    assert edges == 3 + 3 * 3
    assert avg == pytest.approx(edges / nodes)


def test_bundle_roundtrip_exact(tmp_path):
    sim, ppis, labels = make_cohort()
    sc = ppis[0].scaffold
    rng = np.random.default_rng(1)
    omics = OmicsMatrix(
        patients=sim.patients, genes=("A", "B", "C", "D"), values=rng.normal(size=(3, 4))
    )
    clinical = ClinicalMatrix(
        patients=sim.patients, features=("age", "bmi"), values=rng.normal(size=(3, 2))
    )
    manifest = save_bundle(tmp_path, omics, clinical, labels, sc, similarity=sim)
    assert manifest["n_scaffold_edges"] == 3
    loaded = load_bundle(tmp_path)
    assert np.array_equal(loaded["omics"].values, omics.values)
    assert np.array_equal(loaded["clinical"].values, clinical.values)
    assert loaded["labels"].labels == labels.labels
    assert loaded["scaffold"].proteins == sc.proteins
    assert loaded["scaffold"].edges == sc.edges
    assert loaded["similarity"].n_edges == sim.n_edges


def test_bundle_keeps_isolated_proteins(tmp_path):
    sc = PpiScaffold(proteins=("A", "B", "LONER"), edges=((0, 1, 0.9),))
    patients = ("p1", "p2")
    sim = PatientSimilarityGraph(patients=patients, edges=(("p1", "p2", 0.5),), k=1)
    omics = OmicsMatrix(patients=patients, genes=("A", "B", "LONER"), values=np.zeros((2, 3)))
    clinical = ClinicalMatrix(patients=patients, features=("f",), values=np.zeros((2, 1)))
    labels = LabelVector(patients=patients, labels=("None", "Focal"))
    save_bundle(tmp_path, omics, clinical, labels, sc, similarity=sim)
    assert load_bundle(tmp_path)["scaffold"].proteins == ("A", "B", "LONER")
