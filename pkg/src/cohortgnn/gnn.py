"""Message-passing layers (GCN / GAT / GraphSAGE), readout pooling, and the
two-level forward pass: a per-patient molecular-graph encoder followed by
propagation over the cohort similarity graph.

Two propagation code paths exist on purpose:

* a fast constant path (dense normalized operators, batched across patients
  because every patient shares one scaffold), used for training/evaluation;
* a fully differentiable path where the adjacency is built with tensor ops,
  used by the explainer so that gradients flow through per-edge masks.  With
  an all-ones mask the differentiable path multiplies by exactly 1.0
  everywhere and reproduces its own unmasked output bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ConfigError, EmptyGraph, ShapeMismatch

ACTIVATIONS = {
    "relu": ad.relu,
    "leaky_relu": lambda t: ad.leaky_relu(t, 0.2),
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "identity": lambda t: t,
}

LAYER_KINDS = ("gcn", "gat", "sage")
READOUTS = ("max", "mean", "sum")


@dataclass
class ArchitectureConfig:
    layer_kind: str = "gcn"
    ppi_layers: int = 2          # molecular-encoder depth
    cohort_layers: int = 2       # cohort-propagation depth (0 = ablation hook)
    ppi_hidden: int = 64
    ppi_embed: int = 32
    cohort_hidden: int = 64
    readout: str = "max"
    activation: str = "relu"
    heads: int = 4               # gat only; hidden dims must divide by heads
    dropout: float = 0.2
    cohort_skip: bool = True     # classifier sees [input features, propagated features]
    cohort_clinical: bool = True  # cohort node features include the clinical vector
    weight_ppi_edges: bool = False

    def __post_init__(self):
        if self.layer_kind not in LAYER_KINDS:
            raise ConfigError(f"layer_kind must be one of {LAYER_KINDS}")
        if self.readout not in READOUTS:
            raise ConfigError(f"readout must be one of {READOUTS}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.ppi_layers < 1 or self.cohort_layers < 0:
            raise ConfigError("ppi_layers >= 1 and cohort_layers >= 0 required")
        if self.heads < 1:
            raise ConfigError("heads >= 1 required")

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


# --- adjacency normalization ----------------------------------------------

def normalize_adjacency(n, dst, src, weights=None, mode="gcn"):
    """Dense normalized propagation operator.

    ``dst``/``src`` are directed index arrays (message flows src -> dst).
    Modes: 'gcn' adds self-loops and returns D^-1/2 (A+I) D^-1/2; 'mean'
    returns row-normalized (A+I); 'neighbor_mean' returns row-normalized A
    without self-loops (rows of isolated nodes are zero).
    """
    dst = np.asarray(dst, dtype=np.intp)
    src = np.asarray(src, dtype=np.intp)
    w = np.ones(len(dst)) if weights is None else np.asarray(weights, dtype=np.float64)
    a = np.zeros((n, n))
    np.add.at(a, (dst, src), w)
    if mode == "gcn":
        deg = 1.0 + a.sum(axis=1)
        dinv = deg**-0.5
        return dinv[:, None] * (a + np.eye(n)) * dinv[None, :]
    if mode == "mean":
        deg = 1.0 + a.sum(axis=1)
        return (a + np.eye(n)) / deg[:, None]
    if mode == "neighbor_mean":
        deg = a.sum(axis=1)
        return a / np.maximum(deg, 1e-12)[:, None]
    raise ConfigError(f"unknown normalization mode {mode!r}")


def normalize_adjacency_diff(n, dst, src, weights, mode, edge_scale):
    """Differentiable masked twin of normalize_adjacency.

    The normalization (degrees) is computed once from the unmasked weights;
    ``edge_scale`` (an (n_edges, 1) tensor, the explainer's soft mask) then
    multiplies the corresponding entries of the fixed normalized operator.
    Masking an edge therefore removes its message instead of being absorbed
    by a degree recomputation, and an exact all-ones mask reproduces the
    constant operator bit for bit (1.0 * x == x).
    """
    base = normalize_adjacency(n, dst, src, weights, mode)
    flat = np.asarray(dst, dtype=np.intp) * n + np.asarray(src, dtype=np.intp)
    delta = ad.add(edge_scale, Tensor(np.full(edge_scale.data.shape, -1.0)))
    mult = ad.add(
        ad.reshape(ad.scatter_add_rows(delta, flat, n * n), (n, n)),
        Tensor(np.ones((n, n))),
    )
    return ad.mul(mult, Tensor(base))


@dataclass
class Propagator:
    """Dense propagation operator, optionally block-batched over patients."""

    op: object  # Tensor (differentiable) or ndarray (constant)
    n_blocks: int = 1

    def apply(self, h):
        if isinstance(self.op, Tensor):
            if self.n_blocks != 1:
                raise ShapeMismatch("differentiable operators are per-patient only")
            return ad.matmul(self.op, h)
        if self.n_blocks == 1:
            return ad.matmul(Tensor(self.op), h)
        return ad.batched_block_matmul(self.op, h, self.n_blocks)


@dataclass
class EdgeSet:
    """Edge list for attention layers: self-loops appended after real edges."""

    dst: np.ndarray
    src: np.ndarray
    mult: Tensor  # (n_edges_incl_self, 1) multiplier on exp(attention scores)
    n: int


def build_edge_set(n, dst, src, weights=None, edge_scale=None, n_blocks=1):
    """EdgeSet for one graph, or for n_blocks disjoint copies of it.

    Edge weights act as multipliers on the exponentiated attention scores
    (an additive log-bias); the explainer's ``edge_scale`` tensor multiplies
    them.  Self-loops always carry multiplier 1.
    """
    dst = np.asarray(dst, dtype=np.intp)
    src = np.asarray(src, dtype=np.intp)
    w = np.ones(len(dst)) if weights is None else np.asarray(weights, dtype=np.float64)

    if edge_scale is not None:
        if n_blocks != 1:
            raise ShapeMismatch("masked edge sets are per-patient only")
        mult_edges = ad.mul_colvec(edge_scale, Tensor(w[:, None]))
    else:
        tiled = np.tile(w, n_blocks)
        mult_edges = Tensor(tiled[:, None])

    offs = (np.arange(n_blocks, dtype=np.intp) * n)[:, None]
    dst_all = (dst[None, :] + offs).reshape(-1)
    src_all = (src[None, :] + offs).reshape(-1)
    total_n = n * n_blocks
    loops = np.arange(total_n, dtype=np.intp)
    mult = ad.concat_rows([mult_edges, Tensor(np.ones((total_n, 1)))])
    return EdgeSet(
        dst=np.concatenate([dst_all, loops]),
        src=np.concatenate([src_all, loops]),
        mult=mult,
        n=total_n,
    )


# --- layers ----------------------------------------------------------------

def gcn_layer(h, prop, w, b, act):
    """act(op . h . W + b)"""
    return act(ad.add(ad.matmul(prop.apply(h), w), b))


def sage_layer(h, prop_mean, w_self, w_neigh, b, act):
    """act(h W_self + mean_neighbors(h) W_neigh + b)"""
    return act(ad.add(ad.add(ad.matmul(h, w_self), ad.matmul(prop_mean.apply(h), w_neigh)), b))


def _gat_head(h, es, w, a_dst, a_src):
    gh = ad.matmul(h, w)
    s = ad.add(
        ad.matmul(ad.gather_rows(gh, es.dst), a_dst),
        ad.matmul(ad.gather_rows(gh, es.src), a_src),
    )
    s = ad.leaky_relu(s, 0.2)
    # Per-destination max shift for numerical stability (constant offset,
    # cancels in the softmax).
    shift = np.full(es.n, -np.inf)
    np.maximum.at(shift, es.dst, s.data[:, 0])
    e = ad.exp(ad.add(s, Tensor(-shift[es.dst][:, None])))
    e = ad.mul(e, es.mult)
    denom = ad.scatter_add_rows(e, es.dst, es.n)
    alpha = ad.mul(e, ad.power(ad.gather_rows(denom, es.dst), -1.0))
    msgs = ad.mul_colvec(ad.gather_rows(gh, es.src), alpha)
    return ad.scatter_add_rows(msgs, es.dst, es.n), alpha


def gat_layer(h, es, head_params, b, act):
    """Multi-head attention aggregation; head outputs are concatenated."""
    outs = [_gat_head(h, es, w, a_d, a_s)[0] for (w, a_d, a_s) in head_params]
    out = outs[0] if len(outs) == 1 else ad.concat_cols(outs)
    return act(ad.add(out, b))


def gat_attention(h, es, w, a_dst, a_src):
    """Attention coefficients of one head as a numpy array (one per edge)."""
    _, alpha = _gat_head(Tensor(np.asarray(h, dtype=np.float64)), es, w, a_dst, a_src)
    return alpha.data[:, 0]


def readout(node_embeddings, mode="max", n_graphs=1):
    """Permutation-invariant pooling of node embeddings per graph block."""
    h = node_embeddings if isinstance(node_embeddings, Tensor) else Tensor(node_embeddings)
    if h.data.shape[0] == 0:
        raise EmptyGraph("readout of an empty graph")
    if mode not in READOUTS:
        raise ConfigError(f"readout must be one of {READOUTS}")
    return ad.segment_reduce(h, n_graphs, mode)


# --- model bundle ----------------------------------------------------------

MODES = ("hierarchical", "sim_only", "ppi_only")


@dataclass
class ModelBundle:
    params: dict
    config: ArchitectureConfig
    seed: int
    mode: str
    d_in: int
    n_classes: int
    sim_feat_dim: int | None = None

    def param_list(self):
        return [self.params[k] for k in sorted(self.params)]

    def clone(self):
        params = {k: Parameter(p.data.copy(), p.name) for k, p in self.params.items()}
        return replace(self, params=params)

    def checkpoint_config(self):
        return {
            "architecture": self.config.to_dict(),
            "mode": self.mode,
            "d_in": self.d_in,
            "n_classes": self.n_classes,
            "sim_feat_dim": self.sim_feat_dim,
        }

    def save(self, path):
        ad.save_checkpoint(path, self.param_list(), self.checkpoint_config(), self.seed)

    @classmethod
    def load(cls, path):
        params, config, seed = ad.load_checkpoint(path)
        return cls(
            params=params,
            config=ArchitectureConfig.from_dict(config["architecture"]),
            seed=seed,
            mode=config["mode"],
            d_in=config["d_in"],
            n_classes=config["n_classes"],
            sim_feat_dim=config.get("sim_feat_dim"),
        )


def _head_dim(out_dim, heads, kind):
    if kind != "gat":
        return out_dim
    if out_dim % heads != 0:
        raise ConfigError(f"gat output dim {out_dim} not divisible by {heads} heads")
    return out_dim // heads


def _init_stack(params, prefix, dims, kind, heads, rng):
    for i in range(len(dims) - 1):
        d_in, d_out = dims[i], dims[i + 1]
        base = f"{prefix}.{i}"
        params[f"{base}.b"] = Parameter(np.zeros((1, d_out)), f"{base}.b")
        if kind == "gcn":
            params[f"{base}.W"] = Parameter(ad.glorot_uniform((d_in, d_out), rng), f"{base}.W")
        elif kind == "sage":
            params[f"{base}.W_self"] = Parameter(
                ad.glorot_uniform((d_in, d_out), rng), f"{base}.W_self"
            )
            params[f"{base}.W_neigh"] = Parameter(
                ad.glorot_uniform((d_in, d_out), rng), f"{base}.W_neigh"
            )
        else:  # gat
            hd = _head_dim(d_out, heads, kind)
            for k in range(heads):
                params[f"{base}.h{k}.W"] = Parameter(
                    ad.glorot_uniform((d_in, hd), rng), f"{base}.h{k}.W"
                )
                params[f"{base}.h{k}.a_dst"] = Parameter(
                    ad.glorot_uniform((hd, 1), rng), f"{base}.h{k}.a_dst"
                )
                params[f"{base}.h{k}.a_src"] = Parameter(
                    ad.glorot_uniform((hd, 1), rng), f"{base}.h{k}.a_src"
                )


def init_model(config, d_in, n_classes, mode="hierarchical", sim_feat_dim=None, seed=0):
    """Seeded Glorot-uniform weights, zero biases."""
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    if mode == "sim_only" and sim_feat_dim is None:
        raise ConfigError("sim_only mode requires sim_feat_dim")
    rng = np.random.default_rng(seed)
    params = {}

    if mode != "sim_only":
        ppi_dims = [d_in] + [config.ppi_hidden] * (config.ppi_layers - 1) + [config.ppi_embed]
        _init_stack(params, "ppi", ppi_dims, config.layer_kind, config.heads, rng)

    if mode == "hierarchical":
        feat_dim = config.ppi_embed
        if config.cohort_clinical and sim_feat_dim is not None:
            feat_dim += sim_feat_dim
    else:
        feat_dim = sim_feat_dim
    if mode == "ppi_only":
        head_in = config.ppi_embed
    else:
        cohort_dims = [feat_dim] + [config.cohort_hidden] * config.cohort_layers
        _init_stack(params, "cohort", cohort_dims, config.layer_kind, config.heads, rng)
        if config.cohort_layers == 0:
            head_in = feat_dim
        elif config.cohort_skip:
            head_in = feat_dim + config.cohort_hidden
        else:
            head_in = config.cohort_hidden

    params["head.W"] = Parameter(ad.glorot_uniform((head_in, n_classes), rng), "head.W")
    params["head.b"] = Parameter(np.zeros((1, n_classes)), "head.b")
    return ModelBundle(
        params=params,
        config=config,
        seed=seed,
        mode=mode,
        d_in=d_in,
        n_classes=n_classes,
        sim_feat_dim=sim_feat_dim,
    )


def _apply_stack(model, prefix, h, graph, n_layers, rng, training):
    """Run one message-passing stack; dropout after every hidden activation."""
    cfg = model.config
    act = ACTIVATIONS[cfg.activation]
    for i in range(n_layers):
        base = f"{prefix}.{i}"
        b = model.params[f"{base}.b"]
        if cfg.layer_kind == "gcn":
            h = gcn_layer(h, graph, model.params[f"{base}.W"], b, act)
        elif cfg.layer_kind == "sage":
            h = sage_layer(
                h, graph, model.params[f"{base}.W_self"], model.params[f"{base}.W_neigh"], b, act
            )
        else:
            heads = [
                (
                    model.params[f"{base}.h{k}.W"],
                    model.params[f"{base}.h{k}.a_dst"],
                    model.params[f"{base}.h{k}.a_src"],
                )
                for k in range(cfg.heads)
            ]
            h = gat_layer(h, graph, heads, b, act)
        if training and cfg.dropout > 0 and i < n_layers - 1:
            h = ad.dropout(h, cfg.dropout, rng, training)
    return h


def _head(model, feats, h_cohort):
    cfg = model.config
    if model.mode == "ppi_only" or cfg.cohort_layers == 0:
        head_in = feats
    elif cfg.cohort_skip:
        head_in = ad.concat_cols([feats, h_cohort])
    else:
        head_in = h_cohort
    return ad.add(ad.matmul(head_in, model.params["head.W"]), model.params["head.b"])


class CohortGraphs:
    """Precomputed constant propagation structures for one cohort.

    ``scaffold``: directed (dst, src, conf) over one scaffold copy.
    ``sim``: directed (dst, src, weight) over patients.
    """

    def __init__(self, P, V, scaffold_edges, sim_edges):
        self.P = P
        self.V = V
        self.scaffold_dst, self.scaffold_src, self.scaffold_conf = scaffold_edges
        self.sim_dst, self.sim_src, self.sim_w = sim_edges
        self._cache = {}

    def ppi_graph(self, config):
        """Batched propagation structure for P copies of the scaffold."""
        kind = config.layer_kind
        w = self.scaffold_conf if config.weight_ppi_edges else None
        key = ("ppi", kind, config.weight_ppi_edges)
        if key not in self._cache:
            if kind == "gat":
                self._cache[key] = build_edge_set(
                    self.V, self.scaffold_dst, self.scaffold_src, w, n_blocks=self.P
                )
            else:
                mode = "gcn" if kind == "gcn" else "neighbor_mean"
                op = normalize_adjacency(self.V, self.scaffold_dst, self.scaffold_src, w, mode)
                self._cache[key] = Propagator(op, n_blocks=self.P)
        return self._cache[key]

    def ppi_graph_masked(self, config, edge_scale):
        """Differentiable per-patient structure; ``edge_scale`` is (2E, 1)."""
        kind = config.layer_kind
        w = (
            self.scaffold_conf
            if config.weight_ppi_edges
            else np.ones(len(self.scaffold_dst))
        )
        if kind == "gat":
            return build_edge_set(
                self.V, self.scaffold_dst, self.scaffold_src, w, edge_scale=edge_scale
            )
        mode = "gcn" if kind == "gcn" else "neighbor_mean"
        op = normalize_adjacency_diff(
            self.V, self.scaffold_dst, self.scaffold_src, w, mode, edge_scale
        )
        return Propagator(op)

    def cohort_graph(self, config):
        kind = config.layer_kind
        key = ("cohort", kind)
        if key not in self._cache:
            if kind == "gat":
                self._cache[key] = build_edge_set(self.P, self.sim_dst, self.sim_src, self.sim_w)
            else:
                mode = "gcn" if kind == "gcn" else "neighbor_mean"
                op = normalize_adjacency(self.P, self.sim_dst, self.sim_src, self.sim_w, mode)
                self._cache[key] = Propagator(op)
        return self._cache[key]


def encode_ppi(model, X, graphs, training=False, rng=None):
    """z_i for every patient: message passing on the shared scaffold + readout.

    ``X`` is the (P*V, d) stacked feature tensor.
    """
    h = X if isinstance(X, Tensor) else Tensor(X)
    h = _apply_stack(
        model, "ppi", h, graphs.ppi_graph(model.config), model.config.ppi_layers, rng, training
    )
    return readout(h, model.config.readout, n_graphs=graphs.P)


def hierarchical_forward(model, X, graphs, sim_features=None, training=False, rng=None):
    """Full forward pass to (P x C) logits, per the bundle's mode."""
    if model.mode == "sim_only":
        feats = sim_features if isinstance(sim_features, Tensor) else Tensor(sim_features)
    else:
        feats = encode_ppi(model, X, graphs, training, rng)
    if model.mode == "ppi_only":
        return _head(model, feats, None)
    if model.mode == "hierarchical" and model.config.cohort_clinical and sim_features is not None:
        sf = sim_features if isinstance(sim_features, Tensor) else Tensor(sim_features)
        feats = ad.concat_cols([feats, sf])
    h = _apply_stack(
        model,
        "cohort",
        feats,
        graphs.cohort_graph(model.config),
        model.config.cohort_layers,
        rng,
        training,
    )
    return _head(model, feats, h)


def masked_patient_logits(model, X, graphs, patient_idx, z_cache, edge_mask=None,
                          feature_mask=None, sim_features=None):
    """Logits row for one patient with soft masks on its scaffold copy.

    ``edge_mask``: (E, 1) tensor of per-undirected-edge probabilities (or
    None for exact ones).  ``feature_mask``: (1, d) tensor.  ``z_cache`` is
    the (P, embed) matrix of unmasked patient embeddings; only the target
    patient is re-encoded, so gradients flow solely through its masks.
    Passing None masks takes the identical code path with constant ones,
    which reproduces the unmasked logits bit-exactly.
    """
    P, V = graphs.P, graphs.V
    n_dir = len(graphs.scaffold_dst)
    if edge_mask is None:
        edge_mask = Tensor(np.ones((n_dir // 2, 1)))
    # Undirected mask duplicated onto both edge orientations.
    tile_idx = np.concatenate([np.arange(n_dir // 2), np.arange(n_dir // 2)]).astype(np.intp)
    edge_scale = ad.gather_rows(edge_mask, tile_idx)

    Xi = Tensor(np.asarray(X, dtype=np.float64).reshape(P, V, -1)[patient_idx])
    if feature_mask is None:
        feature_mask = Tensor(np.ones((1, Xi.data.shape[1])))
    Xi = ad.mul_rowvec(Xi, feature_mask)

    if model.mode == "sim_only":
        raise ConfigError("sim_only models have no molecular graph to explain")

    single = CohortGraphs(
        1,
        V,
        (graphs.scaffold_dst, graphs.scaffold_src, graphs.scaffold_conf),
        (graphs.sim_dst, graphs.sim_src, graphs.sim_w),
    )
    graph_i = single.ppi_graph_masked(model.config, edge_scale)
    h = _apply_stack(model, "ppi", Xi, graph_i, model.config.ppi_layers, None, False)
    z_i = readout(h, model.config.readout, n_graphs=1)

    if model.mode == "ppi_only":
        return ad.gather_rows(_head(model, z_i, None), np.array([0]))

    parts = []
    if patient_idx > 0:
        parts.append(Tensor(z_cache[:patient_idx]))
    parts.append(z_i)
    if patient_idx < P - 1:
        parts.append(Tensor(z_cache[patient_idx + 1 :]))
    feats = ad.concat_rows(parts)
    if model.config.cohort_clinical and sim_features is not None:
        feats = ad.concat_cols([feats, Tensor(np.asarray(sim_features, dtype=np.float64))])
    h_cohort = _apply_stack(
        model, "cohort", feats, graphs.cohort_graph(model.config), model.config.cohort_layers,
        None, False,
    )
    logits = _head(model, feats, h_cohort)
    return ad.gather_rows(logits, np.array([patient_idx]))
