"""Hierarchical cohort GNN toolkit.

Per-patient molecular interaction graphs are encoded into patient
embeddings, propagated over a clinical patient-similarity graph, and
classified; trained models are probed with per-patient explanation masks
which are then clustered into molecular subtypes.
"""

__version__ = "0.1.0"

from .core import (
    ClinicalMatrix,
    HierarchicalCohort,
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
from .errors import CohortError, ConfigError, DataError, NumericalError
from .gnn import ArchitectureConfig, ModelBundle
from .simgraph import SimilarityConfig, build_similarity_graph
from .train import TrainConfig, cross_validate, run_ablation, stratified_kfold, train_model

__all__ = [
    "ArchitectureConfig",
    "ClinicalMatrix",
    "CohortError",
    "ConfigError",
    "DataError",
    "HierarchicalCohort",
    "LabelVector",
    "ModelBundle",
    "NumericalError",
    "OmicsMatrix",
    "PatientPpiGraph",
    "PatientSimilarityGraph",
    "PpiScaffold",
    "SimilarityConfig",
    "TrainConfig",
    "assemble_hierarchy",
    "build_similarity_graph",
    "cross_validate",
    "flattened_stats",
    "load_bundle",
    "run_ablation",
    "save_bundle",
    "stratified_kfold",
    "train_model",
    "__version__",
]
