"""Synthetic cohorts with planted, controllable signal.

Signal can be planted independently in clinical features (class mean
shifts), in molecular node features over the scaffold (informative genes),
and in within-class explanation motifs (connected edge subsets whose genes
are co-shifted).  Ground truth is returned alongside so recovery tests can
score against it.  Everything is a pure function of the config.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .core import DEFAULT_LABEL_SET, ClinicalMatrix, LabelVector, OmicsMatrix, PpiScaffold
from .errors import ConfigError, InfeasibleMotif
from .explain import ExplanationMask


@dataclass
class SynthConfig:
    patients: int = 120
    proteins: int = 300
    target_edges: int = 2400
    classes: int = 4
    clinical_dims: int = 8
    delta_clinical: float = 1.0
    delta_molecular: float = 1.0
    n_informative_genes: int = 30
    motifs_per_class: int = 1     # within-class molecular cluster count
    motif_size: int = 8           # genes per motif
    motif_separation: float = 1.5
    noise_sigma: float = 1.0
    extra_genes: int = 0          # noise genes beyond the scaffold
    seed: int = 0

    def __post_init__(self):
        if min(self.patients, self.proteins, self.classes, self.clinical_dims) < 1:
            raise ConfigError("all counts must be positive")
        if self.classes < 2:
            raise ConfigError("need >= 2 classes")
        if min(self.delta_clinical, self.delta_molecular, self.motif_separation) < 0:
            raise ConfigError("effect sizes must be >= 0")
        if self.motif_size > self.proteins:
            raise InfeasibleMotif(
                f"motif of {self.motif_size} genes exceeds {self.proteins} proteins"
            )

    def label_set(self):
        if self.classes == len(DEFAULT_LABEL_SET):
            return DEFAULT_LABEL_SET
        return tuple(f"class{i}" for i in range(self.classes))


@dataclass
class SynthCohort:
    omics: OmicsMatrix
    clinical: ClinicalMatrix
    labels: LabelVector
    scaffold: PpiScaffold
    ground_truth: dict


def _random_scaffold(rng, n, target_edges, extra_edges=()):
    """Erdos-Renyi-style scaffold by sampling distinct unordered pairs."""
    max_edges = n * (n - 1) // 2
    if target_edges > max_edges:
        raise ConfigError(f"{target_edges} edges impossible with {n} proteins")
    chosen = {(min(a, b), max(a, b)) for a, b in extra_edges}
    flat = rng.choice(max_edges, size=min(max_edges, target_edges + len(chosen)), replace=False)
    for f in flat:
        if len(chosen) >= target_edges + len(extra_edges):
            break
        i = int(np.floor((1 + np.sqrt(1 + 8 * f)) / 2))
        j = int(f - i * (i - 1) // 2)
        chosen.add((j, i))
    edges = sorted(chosen)
    confidences = rng.uniform(0.7, 1.0, size=len(edges))
    return [(a, b, float(c)) for (a, b), c in zip(edges, confidences)]


def _adjacency_sets(edges, n):
    adj = [set() for _ in range(n)]
    for a, b, _ in edges:
        adj[a].add(b)
        adj[b].add(a)
    return adj


def _connected_motif(rng, adj, size, forbidden):
    """Grow a connected node subset by randomized BFS, avoiding ``forbidden``."""
    nodes = [v for v in range(len(adj)) if v not in forbidden and adj[v]]
    if not nodes:
        raise InfeasibleMotif("no eligible seed node for motif")
    for _ in range(50):
        seed_node = int(rng.choice(nodes))
        motif = [seed_node]
        frontier = sorted(adj[seed_node] - forbidden)
        while frontier and len(motif) < size:
            nxt = int(rng.choice(frontier))
            motif.append(nxt)
            frontier = sorted(
                (set(frontier) | (adj[nxt] - forbidden)) - set(motif)
            )
        if len(motif) == size:
            return sorted(motif)
    raise InfeasibleMotif(f"could not grow a connected motif of size {size}")


def _induced_edge_indices(scaffold_edges, nodes):
    node_set = set(nodes)
    return [i for i, (a, b, _) in enumerate(scaffold_edges) if a in node_set and b in node_set]


def _gene_names(n):
    return tuple(f"G{i:04d}" for i in range(n))


def generate_cohort(cfg):
    """Cohort with class-dependent clinical and molecular mean shifts plus
    per-class explanation motifs realizing within-class molecular clusters."""
    rng = np.random.default_rng(cfg.seed)
    p, v, c = cfg.patients, cfg.proteins, cfg.classes

    edges = _random_scaffold(rng, v, cfg.target_edges)
    adj = _adjacency_sets(edges, v)

    label_set = cfg.label_set()
    y = np.array([i % c for i in range(p)])
    rng.shuffle(y)
    patients = tuple(f"pt{i:04d}" for i in range(p))

    clinical = rng.normal(0.0, 1.0, size=(p, cfg.clinical_dims))
    for cls in range(c):
        dim = cls % cfg.clinical_dims
        clinical[y == cls, dim] += cfg.delta_clinical

    n_genes = v + cfg.extra_genes
    omics = rng.normal(0.0, cfg.noise_sigma, size=(p, n_genes))

    informative = sorted(
        int(g) for g in rng.choice(v, size=min(cfg.n_informative_genes, v), replace=False)
    )
    # One strong shared pattern: evenly spaced class levels, zero mean.
    levels = cfg.delta_molecular * (np.arange(c) - (c - 1) / 2.0)
    for g in informative:
        omics[:, g] += levels[y]

    motifs = {}
    cluster_of = np.zeros(p, dtype=np.intp)
    forbidden = set(informative)
    if cfg.motifs_per_class >= 1 and cfg.motif_separation > 0:
        for cls in range(c):
            members = np.where(y == cls)[0]
            class_motifs = []
            for j in range(cfg.motifs_per_class):
                nodes = _connected_motif(rng, adj, cfg.motif_size, forbidden)
                forbidden.update(nodes)
                class_motifs.append(
                    {"genes": nodes, "edges": _induced_edge_indices(edges, nodes)}
                )
            motifs[cls] = class_motifs
            shuffled = members.copy()
            rng.shuffle(shuffled)
            for rank, idx in enumerate(shuffled):
                j = rank % cfg.motifs_per_class
                cluster_of[idx] = j
                omics[idx, motifs[cls][j]["genes"]] += cfg.motif_separation

    gene_names = _gene_names(n_genes)
    ground_truth = {
        "config": asdict(cfg),
        "informative_genes": [gene_names[g] for g in informative],
        "motifs": {
            str(cls): [
                {"genes": [gene_names[g] for g in m["genes"]], "edges": m["edges"]}
                for m in ms
            ]
            for cls, ms in motifs.items()
        },
        "cluster_of": cluster_of.tolist(),
        "labels": [label_set[t] for t in y],
    }
    return SynthCohort(
        omics=OmicsMatrix(patients=patients, genes=gene_names, values=omics),
        clinical=ClinicalMatrix(
            patients=patients,
            features=tuple(f"clin{i}" for i in range(cfg.clinical_dims)),
            values=clinical,
        ),
        labels=LabelVector(
            patients=patients, labels=tuple(label_set[t] for t in y), label_set=label_set
        ),
        scaffold=PpiScaffold(proteins=_gene_names(v), edges=tuple(edges)),
        ground_truth=ground_truth,
    )


def complementary_signal_cohort(cfg):
    """Four classes with disjoint signal routes.

    Classes 0/1 differ only in clinical features; classes 2/3 share one
    clinical profile and differ only molecularly: class 2's shifted genes
    form a planted clique (topologically amplified), class 3's form an
    independent set of the same size, so pooled per-patient omics summaries
    cannot tell them apart while graph propagation can.
    """
    if cfg.classes != 4:
        raise ConfigError("complementary-signal construction requires exactly 4 classes")
    if cfg.clinical_dims < 2:
        raise ConfigError("need >= 2 clinical dims")
    rng = np.random.default_rng(cfg.seed)
    p, v = cfg.patients, cfg.proteins
    q = cfg.motif_size

    clique_nodes = sorted(int(g) for g in rng.choice(v, size=q, replace=False))
    clique_edges = [
        (clique_nodes[i], clique_nodes[j])
        for i in range(q)
        for j in range(i + 1, q)
    ]
    edges = _random_scaffold(rng, v, cfg.target_edges, extra_edges=clique_edges)
    adj = _adjacency_sets(edges, v)

    # Independent set of the same size, disjoint from the clique.
    scattered = []
    blocked = set(clique_nodes)
    order = rng.permutation(v)
    for node in order:
        node = int(node)
        if node in blocked:
            continue
        scattered.append(node)
        blocked.add(node)
        blocked.update(adj[node])
        if len(scattered) == q:
            break
    if len(scattered) < q:
        raise InfeasibleMotif("could not find an independent set of the motif size")
    scattered = sorted(scattered)

    label_set = cfg.label_set()
    y = np.array([i % 4 for i in range(p)])
    rng.shuffle(y)
    patients = tuple(f"pt{i:04d}" for i in range(p))

    clinical = rng.normal(0.0, 1.0, size=(p, cfg.clinical_dims))
    clinical[y == 0, 0] += cfg.delta_clinical
    clinical[y == 1, 0] -= cfg.delta_clinical
    clinical[(y == 2) | (y == 3), 1] += cfg.delta_clinical  # shared: C/D clinically identical

    omics = rng.normal(0.0, cfg.noise_sigma, size=(p, v))
    omics[np.ix_(y == 2, clique_nodes)] += cfg.delta_molecular
    omics[np.ix_(y == 3, scattered)] += cfg.delta_molecular

    gene_names = _gene_names(v)
    ground_truth = {
        "config": asdict(cfg),
        "clinical_pairs": [0, 1],
        "molecular_pairs": [2, 3],
        "clique_genes": [gene_names[g] for g in clique_nodes],
        "scattered_genes": [gene_names[g] for g in scattered],
        "clique_edges": _induced_edge_indices(edges, clique_nodes),
        "labels": [label_set[t] for t in y],
    }
    return SynthCohort(
        omics=OmicsMatrix(patients=patients, genes=gene_names, values=omics),
        clinical=ClinicalMatrix(
            patients=patients,
            features=tuple(f"clin{i}" for i in range(cfg.clinical_dims)),
            values=clinical,
        ),
        labels=LabelVector(
            patients=patients, labels=tuple(label_set[t] for t in y), label_set=label_set
        ),
        scaffold=PpiScaffold(proteins=gene_names, edges=tuple(edges)),
        ground_truth=ground_truth,
    )


def planted_explanations(scaffold, labels, cluster_of, motifs, high=0.9, low=0.1,
                         noise=0.03, seed=0):
    """Synthetic explanation masks realizing the planted motif structure.

    Each patient's mask is ``high`` on its motif's induced edges and ``low``
    elsewhere, with truncated Gaussian jitter.  Useful for exercising the
    clustering pipeline independently of the explainer.
    """
    rng = np.random.default_rng(seed)
    y = labels.as_indices()
    masks = []
    n_edges = scaffold.n_edges
    for i, patient in enumerate(labels.patients):
        weights = np.full(n_edges, low)
        class_motifs = motifs.get(str(int(y[i]))) or motifs.get(int(y[i]))
        if class_motifs:
            motif = class_motifs[int(cluster_of[i]) % len(class_motifs)]
            weights[motif["edges"]] = high
        weights = np.clip(weights + rng.normal(0.0, noise, size=n_edges), 1e-6, 1 - 1e-6)
        masks.append(
            ExplanationMask(
                patient=patient,
                edge_logits=np.log(weights / (1.0 - weights)),
                feature_logits=np.zeros(1),
                predicted_class=int(y[i]),
                converged=True,
                loss_trace=[(0.0, 0.0, 0.0)],
            )
        )
    return masks


def save_ground_truth(path, cohort):
    with open(path, "w") as fh:
        json.dump(cohort.ground_truth, fh, indent=2, sort_keys=True)
        fh.write("\n")
