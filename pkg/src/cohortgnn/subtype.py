"""Within-phenotype patient clustering from explanation vectors.

The aligned edge-mask weight vectors over the shared scaffold are embedded
to 2-D with t-SNE (exact, with perplexity calibration by per-point binary
search) and clustered with k-means++.  The divergence trace is kept
monotone after the early-exaggeration phase by a backtracking step-size
safeguard, so convergence diagnostics are meaningful.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    EmptyClusterAfterConvergence,
    PerplexityTooLarge,
    SubtypeTooSmall,
)

# Silhouette below this is reported as "no cluster structure".
NO_STRUCTURE_SILHOUETTE = 0.25


# --- t-SNE -----------------------------------------------------------------

def _conditional_probabilities(dist2, perplexity, tol=1e-7, max_iter=80):
    """Per-point Gaussian bandwidths by binary search on the precision so the
    conditional distribution's entropy (bits) hits log2(perplexity)."""
    n = dist2.shape[0]
    target = np.log2(perplexity)
    p = np.zeros((n, n))
    for i in range(n):
        d = np.delete(dist2[i], i)
        beta, lo, hi = 1.0, 0.0, np.inf
        for _ in range(max_iter):
            w = np.exp(-d * beta)
            total = w.sum()
            if total <= 0:
                entropy = 0.0
                probs = np.zeros_like(w)
            else:
                probs = w / total
                nz = probs > 0
                entropy = -np.sum(probs[nz] * np.log2(probs[nz]))
            diff = entropy - target
            if abs(diff) < tol:
                break
            if diff > 0:  # too spread out: raise precision
                lo = beta
                beta = beta * 2.0 if hi == np.inf else (beta + hi) / 2.0
            else:
                hi = beta
                beta = (beta + lo) / 2.0
        p[i, np.arange(n) != i] = probs
    return p


def joint_probabilities(x, perplexity):
    """Symmetrized t-SNE input distribution; sums to 1, zero diagonal."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    sq = (x * x).sum(axis=1)
    dist2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * x @ x.T, 0.0)
    cond = _conditional_probabilities(dist2, perplexity)
    p = (cond + cond.T) / (2.0 * n)
    return np.maximum(p, 0.0)


def _kl_and_grad(p, y):
    n = y.shape[0]
    sq = (y * y).sum(axis=1)
    num = 1.0 / (1.0 + np.maximum(sq[:, None] + sq[None, :] - 2.0 * y @ y.T, 0.0))
    np.fill_diagonal(num, 0.0)
    q = np.maximum(num / num.sum(), 1e-12)
    pq = np.maximum(p, 1e-12)
    kl = float(np.sum(p * np.log(pq / q)))
    coeff = (p - q) * num
    grad = 4.0 * ((np.diag(coeff.sum(axis=1)) - coeff) @ y)
    return kl, grad


def tsne_embed(x, perplexity=15.0, iters=1000, seed=0, learning_rate=100.0,
               exaggeration=12.0, exaggeration_iters=250):
    """Exact t-SNE to 2-D.  Returns (embedding, KL trace).

    Momentum 0.5 during early exaggeration, 0.8 after; after the
    exaggeration phase each step is backtracked (step halved, momentum
    reset) until the KL divergence does not increase, making the recorded
    trace non-increasing from that point on.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n < 4:
        raise PerplexityTooLarge(f"need >= 4 points, got {n}")
    if perplexity >= (n - 1) / 3.0:
        raise PerplexityTooLarge(
            f"perplexity {perplexity} too large for {n} points (limit {(n - 1) / 3:.2f})"
        )
    p = joint_probabilities(x, perplexity)
    rng = np.random.default_rng(seed)
    y = rng.normal(scale=1e-4, size=(n, 2))
    velocity = np.zeros_like(y)
    trace = []
    lr = learning_rate
    kl_prev = None
    for it in range(iters):
        exaggerating = it < exaggeration_iters
        p_eff = p * exaggeration if exaggerating else p
        kl, grad = _kl_and_grad(p_eff, y)
        if exaggerating:
            momentum = 0.5
            velocity = momentum * velocity - lr * grad
            y = y + velocity
            trace.append(kl)
            continue

        if kl_prev is None:
            kl_prev = kl
        # Backtracking safeguard: accept only non-increasing KL.
        momentum = 0.8
        step = momentum * velocity - lr * grad
        y_new = y + step
        kl_new, _ = _kl_and_grad(p, y_new)
        tries = 0
        while kl_new > kl_prev and tries < 40:
            lr *= 0.5
            velocity[:] = 0.0
            step = -lr * grad
            y_new = y + step
            kl_new, _ = _kl_and_grad(p, y_new)
            tries += 1
        if kl_new > kl_prev:
            y_new, kl_new, step = y, kl_prev, np.zeros_like(y)
        velocity = step
        y = y_new
        kl_prev = kl_new
        trace.append(kl_new)
    return y - y.mean(axis=0), trace


# --- k-means ---------------------------------------------------------------

def _kmeans_pp_init(x, kc, rng):
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    for _ in range(1, kc):
        d2 = np.min(
            [(np.linalg.norm(x - c, axis=1) ** 2) for c in centers], axis=0
        )
        total = d2.sum()
        if total <= 0:
            centers.append(x[rng.integers(n)])
            continue
        probs = d2 / total
        centers.append(x[rng.choice(n, p=probs)])
    return np.array(centers)


def _lloyd(x, centers, max_iter=300):
    for _ in range(max_iter):
        dist = np.linalg.norm(x[:, None, :] - centers[None, :, :], axis=2)
        assign = dist.argmin(axis=1)
        new_centers = centers.copy()
        for c in range(len(centers)):
            members = x[assign == c]
            if len(members) == 0:
                # Re-seed an empty cluster at the point farthest from its center.
                far = dist.min(axis=1).argmax()
                new_centers[c] = x[far]
            else:
                new_centers[c] = members.mean(axis=0)
        if np.allclose(new_centers, centers):
            centers = new_centers
            break
        centers = new_centers
    dist = np.linalg.norm(x[:, None, :] - centers[None, :, :], axis=2)
    assign = dist.argmin(axis=1)
    inertia = float((dist[np.arange(len(x)), assign] ** 2).sum())
    return assign, centers, inertia


def kmeans(x, kc, restarts=8, seed=0):
    """k-means++ seeding + Lloyd iterations, best inertia over restarts."""
    x = np.asarray(x, dtype=np.float64)
    if kc > len(x):
        raise EmptyClusterAfterConvergence(f"kc={kc} exceeds {len(x)} points")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        assign, centers, inertia = _lloyd(x, _kmeans_pp_init(x, kc, rng))
        if best is None or inertia < best[2]:
            best = (assign, centers, inertia)
    assign, centers, inertia = best
    if len(np.unique(assign)) < kc:
        raise EmptyClusterAfterConvergence(
            f"only {len(np.unique(assign))} of {kc} clusters are non-empty"
        )
    return assign, centers, inertia


def silhouette_score(x, assign):
    """Mean silhouette over all points (O(n^2))."""
    x = np.asarray(x, dtype=np.float64)
    assign = np.asarray(assign)
    n = len(x)
    clusters = np.unique(assign)
    if len(clusters) < 2:
        return 0.0
    dist = np.linalg.norm(x[:, None, :] - x[None, :, :], axis=2)
    scores = np.zeros(n)
    for i in range(n):
        own = assign[i]
        own_members = (assign == own) & (np.arange(n) != i)
        if not own_members.any():
            scores[i] = 0.0
            continue
        a = dist[i, own_members].mean()
        b = min(dist[i, assign == c].mean() for c in clusters if c != own)
        scores[i] = (b - a) / max(a, b) if max(a, b) > 0 else 0.0
    return float(scores.mean())


# --- subtype reports -------------------------------------------------------

@dataclass
class ClusterReport:
    subtype: str
    patients: list
    embedding: np.ndarray
    assignments: np.ndarray
    cluster_sizes: list
    silhouette: float            # computed in mask space: drives the structure flag
    silhouette_2d: float         # computed on the 2-D embedding (display space)
    silhouette_by_k: dict
    no_cluster_structure: bool
    top_differential_edges: list
    kl_trace: list = field(default_factory=list)

    def to_dict(self):
        return {
            "subtype": self.subtype,
            "patients": list(self.patients),
            "assignments": [int(a) for a in self.assignments],
            "cluster_sizes": [int(s) for s in self.cluster_sizes],
            "silhouette": round(float(self.silhouette), 9),
            "silhouette_2d": round(float(self.silhouette_2d), 9),
            "silhouette_by_k": {str(k): round(float(v), 9) for k, v in self.silhouette_by_k.items()},
            "no_cluster_structure": self.no_cluster_structure,
            "top_differential_edges": [
                {"edge": int(e), "mean_diff": round(float(d), 9)}
                for e, d in self.top_differential_edges
            ],
        }


def explanation_matrix(masks, patients):
    """(patients x scaffold edges) matrix of mask weights, index-aligned."""
    by_patient = {m.patient: m for m in masks}
    return np.array([by_patient[p].edge_weights for p in patients])


def subtype_report(patients, predicted_labels, label_set, masks, kc=2, seed=0,
                   exclude_first_class=True, min_subtype_size=8,
                   perplexity=None, cluster_in_mask_space=False, k_sweep=(2, 3, 4, 5),
                   top_edges=10):
    """Per predicted phenotype: embed explanation vectors, cluster, and rank
    the edges that differ most between clusters.

    The first label (the no-disease class) is excluded by default.  kc
    defaults to 2, but a silhouette sweep over ``k_sweep`` is reported so
    that 2 is checked rather than assumed.
    """
    predicted_labels = np.asarray(predicted_labels)
    by_patient = {m.patient: m for m in masks}
    reports = []
    start = 1 if exclude_first_class else 0
    for cls in range(start, len(label_set)):
        members = [p for p, y in zip(patients, predicted_labels) if y == cls]
        if not members:
            continue
        if len(members) < min_subtype_size:
            raise SubtypeTooSmall(
                f"subtype {label_set[cls]!r} has {len(members)} patients (< {min_subtype_size})"
            )
        missing = [p for p in members if p not in by_patient]
        if missing:
            raise SubtypeTooSmall(f"missing explanations for patients {missing[:5]}")
        matrix = explanation_matrix(masks, members)
        perp = perplexity if perplexity is not None else min(15.0, (len(members) - 1) / 3.0 - 1e-6)
        embedding, kl_trace = tsne_embed(matrix, perplexity=perp, seed=seed)
        space = matrix if cluster_in_mask_space else embedding

        sweep = {}
        for k in k_sweep:
            if k <= len(members) - 1:
                a_k, _, _ = kmeans(space, k, seed=seed)
                sweep[k] = silhouette_score(matrix, a_k)
        assign, _, _ = kmeans(space, kc, seed=seed)
        # t-SNE happily embeds pure jitter as separated islands, so the
        # structure statistic comes from the original mask vectors.
        sil = silhouette_score(matrix, assign)
        sil_2d = silhouette_score(embedding, assign)

        diffs = []
        if len(np.unique(assign)) == 2:
            mean0 = matrix[assign == 0].mean(axis=0)
            mean1 = matrix[assign == 1].mean(axis=0)
            delta = np.abs(mean0 - mean1)
            order = np.argsort(-delta, kind="stable")[:top_edges]
            diffs = [(int(e), float(delta[e])) for e in order]

        sizes = [int((assign == c).sum()) for c in range(kc)]
        reports.append(
            ClusterReport(
                subtype=label_set[cls],
                patients=members,
                embedding=embedding,
                assignments=assign,
                cluster_sizes=sizes,
                silhouette=sil,
                silhouette_2d=sil_2d,
                silhouette_by_k=sweep,
                no_cluster_structure=sil < NO_STRUCTURE_SILHOUETTE,
                top_differential_edges=diffs,
                kl_trace=kl_trace,
            )
        )
    return reports


def save_cluster_outputs(json_path, csv_path, reports):
    """clusters.json plus a plot-ready embedding.csv (patient, x, y, subtype, cluster)."""
    with open(json_path, "w") as fh:
        json.dump([r.to_dict() for r in reports], fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(csv_path, "w") as fh:
        fh.write("patient,x,y,subtype,cluster\n")
        for r in reports:
            for p, (x, y), c in zip(r.patients, r.embedding, r.assignments):
                fh.write(f"{p},{x:.9f},{y:.9f},{r.subtype},{int(c)}\n")
