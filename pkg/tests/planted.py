"""Hand-built single-patient models whose prediction hinges on one edge.

The construction gives an exact oracle for edge-importance tests: a
1-layer GCN over a small random graph, identity activation, sum readout.
One node carries a large feature; the classifier threshold is placed
midway between the readout with the strongest incident edge present and
absent, so removing exactly that edge flips the predicted class.
"""

import numpy as np

from cohortgnn.autodiff import Parameter
from cohortgnn.gnn import (
    ArchitectureConfig,
    CohortGraphs,
    ModelBundle,
    normalize_adjacency,
)
from cohortgnn.train import CohortData


def random_connected_graph(v, extra_edges, rng):
    """Random spanning tree plus extra distinct non-tree edges."""
    edges = set()
    order = rng.permutation(v)
    for i in range(1, v):
        a, b = int(order[i]), int(order[rng.integers(0, i)])
        edges.add((min(a, b), max(a, b)))
    while len(edges) < v - 1 + extra_edges:
        a, b = rng.integers(0, v, size=2)
        if a != b:
            edges.add((min(a, b), max(a, b)))
    return sorted(edges)


def make_planted_instance(seed, v=10, extra_edges=5, signal=3.0, noise=0.02):
    """Returns (model, data, planted_edge_index).

    ``planted_edge_index`` indexes the undirected edge list; the model's
    predicted class for the single patient changes iff that edge is
    removed, and removing any other single edge leaves it unchanged.
    """
    rng = np.random.default_rng(seed)
    pairs = random_connected_graph(v, extra_edges, rng)
    e = len(pairs)
    a = np.array([p[0] for p in pairs])
    b = np.array([p[1] for p in pairs])
    dst = np.concatenate([b, a])
    src = np.concatenate([a, b])
    conf = np.full(2 * e, 0.9)

    deg = np.bincount(np.concatenate([a, b]), minlength=v)
    u = int(np.argmax(deg))  # well-connected signal node
    x = rng.normal(scale=noise, size=(v, 1))
    x[u, 0] = signal

    op = normalize_adjacency(v, dst, src, None, "gcn")
    # Removing undirected edge i zeroes op[b,a] and op[a,b]; the readout
    # z0 = sum(op @ x) drops by exactly this score.
    scores = op[b, a] * x[a, 0] + op[a, b] * x[b, 0]
    ranked = np.argsort(-scores)
    planted, runner_up = int(ranked[0]), int(ranked[1])
    z0 = float((op @ x).sum())
    c = z0 - 0.5 * (scores[planted] + scores[runner_up])

    cfg = ArchitectureConfig(
        layer_kind="gcn", ppi_layers=1, cohort_layers=0, ppi_embed=2,
        activation="identity", dropout=0.0, readout="sum",
    )
    params = {
        "ppi.0.W": Parameter(np.array([[1.0, 0.0]]), "ppi.0.W"),
        "ppi.0.b": Parameter(np.zeros((1, 2)), "ppi.0.b"),
        "head.W": Parameter(np.array([[-1.0, 1.0], [0.0, 0.0]]), "head.W"),
        "head.b": Parameter(np.array([[c, -c]]), "head.b"),
    }
    model = ModelBundle(
        params=params, config=cfg, seed=seed, mode="ppi_only", d_in=1, n_classes=2
    )
    graphs = CohortGraphs(
        1, v, (dst, src, conf),
        (np.array([], dtype=np.intp), np.array([], dtype=np.intp), np.array([])),
    )
    data = CohortData(
        X=x, graphs=graphs, y=np.array([1]), classes=("a", "b"),
        patients=("p0",), sim_features=None,
    )
    return model, data, planted
