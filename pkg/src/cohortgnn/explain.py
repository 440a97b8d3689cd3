"""Per-patient explanation masks over the shared molecular scaffold.

A frozen trained model is probed by learning soft edge and feature masks
that keep the model's own prediction while shrinking and sharpening the
mask (cross-entropy to the predicted label + size + entropy regularizers,
the usual surrogate for the mutual-information objective).  Masks are
index-aligned across patients because all patients share one scaffold,
which is what makes downstream subtype clustering possible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import NonFiniteLoss, UntrainedModel
from .gnn import encode_ppi, masked_patient_logits


@dataclass
class ExplainOptions:
    iterations: int = 100
    lr: float = 0.01
    lambda_size: float = 0.005
    lambda_entropy: float = 1.0
    use_feature_mask: bool = True


@dataclass
class ExplanationMask:
    patient: str
    edge_logits: np.ndarray       # one per scaffold edge (undirected)
    feature_logits: np.ndarray    # one per feature dimension
    predicted_class: int
    converged: bool
    loss_trace: list = field(default_factory=list)  # (ce, size, entropy) per iteration

    @property
    def edge_weights(self):
        return 1.0 / (1.0 + np.exp(-self.edge_logits))

    @property
    def feature_weights(self):
        return 1.0 / (1.0 + np.exp(-self.feature_logits))


@dataclass
class ExplanationSubgraph:
    patient: str
    edges: list        # (edge index, weight), sorted by descending weight
    fidelity: int      # 1 iff the top-r hard mask preserves the prediction


def _z_cache(model, data):
    if model.mode == "sim_only":
        return None
    return encode_ppi(model, Tensor(data.X), data.graphs).data


def _binary_entropy(p):
    eps = 1e-12
    return ad.mul_scalar(
        ad.add(
            ad.mul(p, ad.log(ad.add(p, Tensor(np.full(p.data.shape, eps))))),
            ad.mul(
                ad.add(Tensor(np.ones(p.data.shape)), ad.mul_scalar(p, -1.0)),
                ad.log(
                    ad.add(
                        ad.add(Tensor(np.ones(p.data.shape)), ad.mul_scalar(p, -1.0)),
                        Tensor(np.full(p.data.shape, eps)),
                    )
                ),
            ),
        ),
        -1.0,
    )


def optimize_mask(model, data, patient_idx, opts=None, z_cache=None):
    """Learn soft masks for one patient against the frozen model.

    Masks start at logit 0 (probability 0.5); the optimized objective is
    CE(masked prediction, model's own unmasked prediction) +
    lambda_size * mean(sigma(M)) + lambda_entropy * mean elementwise binary
    entropy of sigma(M).  Model parameters are never touched.
    """
    if model is None or not model.params:
        raise UntrainedModel("explanation requires a trained model")
    opts = opts or ExplainOptions()
    if z_cache is None:
        z_cache = _z_cache(model, data)

    n_edges = len(data.graphs.scaffold_dst) // 2
    d = data.X.shape[1]
    edge_logits = Parameter(np.zeros((n_edges, 1)), "mask.edges")
    feature_logits = Parameter(np.zeros((1, d)), "mask.features")
    mask_params = [edge_logits] + ([feature_logits] if opts.use_feature_mask else [])

    ref_logits = masked_patient_logits(
        model, data.X, data.graphs, patient_idx, z_cache, sim_features=data.sim_features
    )
    target = int(np.argmax(ref_logits.data[0]))

    trace = []
    for it in range(opts.iterations):
        ad.zero_grads(mask_params)
        edge_prob = ad.sigmoid(edge_logits)
        feat_prob = ad.sigmoid(feature_logits) if opts.use_feature_mask else None
        logits = masked_patient_logits(
            model, data.X, data.graphs, patient_idx, z_cache,
            edge_mask=edge_prob, feature_mask=feat_prob, sim_features=data.sim_features,
        )
        ce = ad.cross_entropy(logits, np.array([target]))
        size = ad.mean_all(edge_prob)
        entropy = ad.mean_all(_binary_entropy(edge_prob))
        loss = ad.add(
            ce,
            ad.add(
                ad.mul_scalar(size, opts.lambda_size),
                ad.mul_scalar(entropy, opts.lambda_entropy),
            ),
        )
        if not np.isfinite(loss.data):
            raise NonFiniteLoss(f"non-finite explainer loss at iteration {it}")
        loss.backward()
        # Plain gradient descent: update magnitudes stay proportional to the
        # loss sensitivity of each edge, which keeps the mask ranking honest.
        for p in mask_params:
            if p.grad is not None:
                p.data -= opts.lr * p.grad
        trace.append((float(ce.data), float(size.data), float(entropy.data)))

    converged = trace[-1][0] <= trace[0][0] + 1e-9
    return ExplanationMask(
        patient=data.patients[patient_idx],
        edge_logits=edge_logits.data[:, 0].copy(),
        feature_logits=feature_logits.data[0].copy(),
        predicted_class=target,
        converged=converged,
        loss_trace=trace,
    )


def _hard_mask_prediction(model, data, patient_idx, keep_edges, z_cache):
    n_edges = len(data.graphs.scaffold_dst) // 2
    hard = np.zeros((n_edges, 1))
    hard[list(keep_edges), 0] = 1.0
    logits = masked_patient_logits(
        model, data.X, data.graphs, patient_idx, z_cache, edge_mask=Tensor(hard),
        sim_features=data.sim_features,
    )
    return int(np.argmax(logits.data[0]))


def extract_subgraph(model, data, mask, patient_idx, r, z_cache=None):
    """Top-r edges by mask weight (ties by edge index), with a fidelity bit."""
    if z_cache is None:
        z_cache = _z_cache(model, data)
    weights = mask.edge_weights
    order = np.lexsort((np.arange(len(weights)), -weights))
    kept = order[:r]
    edges = [(int(i), float(weights[i])) for i in kept]
    full_pred = _hard_mask_prediction(model, data, patient_idx, range(len(weights)), z_cache)
    masked_pred = _hard_mask_prediction(model, data, patient_idx, kept, z_cache)
    return ExplanationSubgraph(
        patient=mask.patient, edges=edges, fidelity=int(masked_pred == full_pred)
    )


def fidelity_eval(model, data, masks, r_grid, z_cache=None):
    """Fraction of patients whose top-r hard-masked prediction matches the
    unmasked prediction, for every r in the grid."""
    if z_cache is None:
        z_cache = _z_cache(model, data)
    patient_to_idx = {p: i for i, p in enumerate(data.patients)}
    curve = {}
    for r in r_grid:
        hits = 0
        for mask in masks:
            idx = patient_to_idx[mask.patient]
            sub = extract_subgraph(model, data, mask, idx, r, z_cache)
            hits += sub.fidelity
        curve[int(r)] = hits / len(masks)
    return curve


def leave_one_edge_out_ranking(model, data, patient_idx, z_cache=None):
    """Brute-force oracle: rank edges by prediction change when removed.

    The change score for edge e is the L1 difference between the class
    probabilities with all edges present and with edge e hard-masked out.
    """
    if z_cache is None:
        z_cache = _z_cache(model, data)
    n_edges = len(data.graphs.scaffold_dst) // 2
    base = masked_patient_logits(
        model, data.X, data.graphs, patient_idx, z_cache, sim_features=data.sim_features
    ).data[0]
    base_p = np.exp(base - base.max())
    base_p /= base_p.sum()
    scores = np.zeros(n_edges)
    for e in range(n_edges):
        hard = np.ones((n_edges, 1))
        hard[e, 0] = 0.0
        logits = masked_patient_logits(
            model, data.X, data.graphs, patient_idx, z_cache, edge_mask=Tensor(hard),
            sim_features=data.sim_features,
        ).data[0]
        p = np.exp(logits - logits.max())
        p /= p.sum()
        scores[e] = np.abs(p - base_p).sum()
    return np.argsort(-scores, kind="stable"), scores


def save_explanations(path, masks, fidelity=None):
    """One JSON record per patient: edge ids, mask weights, loss-trace summary."""
    with open(path, "w") as fh:
        for mask in masks:
            record = {
                "patient": mask.patient,
                "predicted_class": mask.predicted_class,
                "edge_weights": [round(float(w), 9) for w in mask.edge_weights],
                "feature_weights": [round(float(w), 9) for w in mask.feature_weights],
                "converged": mask.converged,
                "loss_first": mask.loss_trace[0],
                "loss_final": mask.loss_trace[-1],
            }
            if fidelity is not None and mask.patient in fidelity:
                record["fidelity"] = fidelity[mask.patient]
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def load_explanations(path):
    masks = []
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            w = np.clip(np.asarray(rec["edge_weights"], dtype=np.float64), 1e-9, 1 - 1e-9)
            fw = np.clip(np.asarray(rec["feature_weights"], dtype=np.float64), 1e-9, 1 - 1e-9)
            masks.append(
                ExplanationMask(
                    patient=rec["patient"],
                    edge_logits=np.log(w / (1 - w)),
                    feature_logits=np.log(fw / (1 - fw)),
                    predicted_class=rec["predicted_class"],
                    converged=rec["converged"],
                    loss_trace=[tuple(rec["loss_first"]), tuple(rec["loss_final"])],
                )
            )
    return masks
