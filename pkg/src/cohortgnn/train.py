"""Training loop, stratified cross-validation, metrics, baselines, and the
ablation harness.

Evaluation is transductive: the similarity graph spans all patients, the
loss is masked to training patients, and each fold's held-out patients are
scored from the same full-graph forward pass.  An internal stratified split
of the training patients provides early stopping.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ClassTooSmall, NonFiniteLoss, SingleClassEval
from .gnn import ArchitectureConfig, CohortGraphs, hierarchical_forward, init_model
from .simgraph import standardize


# --- cohort preparation ----------------------------------------------------

@dataclass
class CohortData:
    """Numeric view of a hierarchical cohort ready for the model."""

    X: np.ndarray              # (P*V, d) stacked scaffold node features
    graphs: CohortGraphs
    y: np.ndarray              # integer labels, aligned with patients
    classes: tuple
    patients: tuple
    sim_features: np.ndarray | None = None  # (P, m+pooled) for the similarity-only ablation


def prepare_cohort_data(cohort, clinical=None):
    """Build CohortData from a HierarchicalCohort (plus clinical for ablations).

    The similarity-only ablation's node features are the standardized
    clinical features concatenated with mean- and max-pooled omics values,
    so it sees both modalities but no interaction topology.
    """
    scaffold = cohort.scaffold
    graphs = CohortGraphs(
        cohort.n_patients,
        scaffold.n_proteins,
        scaffold.edge_arrays(),
        cohort.similarity.edge_arrays(),
    )
    X = cohort.feature_tensor()
    sim_features = None
    if clinical is not None:
        order = {p: i for i, p in enumerate(clinical.patients)}
        rows = np.array([order[p] for p in cohort.patients])
        clin = standardize(clinical.values[rows])
        per_patient = X.reshape(cohort.n_patients, scaffold.n_proteins, -1)
        pooled = np.column_stack(
            [per_patient.mean(axis=(1, 2)), per_patient.max(axis=(1, 2))]
        )
        sim_features = np.column_stack([clin, standardize(pooled)])
    return CohortData(
        X=X,
        graphs=graphs,
        y=cohort.labels.as_indices(),
        classes=cohort.labels.label_set,
        patients=cohort.patients,
        sim_features=sim_features,
    )


# --- folds -----------------------------------------------------------------

@dataclass
class FoldPlan:
    n_folds: int
    assignments: np.ndarray
    seed: int

    def train_indices(self, fold_id):
        return np.where(self.assignments != fold_id)[0]

    def test_indices(self, fold_id):
        return np.where(self.assignments == fold_id)[0]


def stratified_kfold(labels, n_folds, seed=0):
    """Shuffle within class by seed, deal round-robin with a global pointer.

    The global pointer keeps overall fold sizes within one of each other
    while per-class counts stay within one of perfect proportionality.
    """
    y = labels.as_indices() if hasattr(labels, "as_indices") else np.asarray(labels)
    n = len(y)
    rng = np.random.default_rng(seed)
    assignments = np.empty(n, dtype=np.intp)
    pointer = 0
    for cls in np.unique(y):
        members = np.where(y == cls)[0]
        if len(members) < n_folds:
            raise ClassTooSmall(
                f"class {cls} has {len(members)} members, fewer than {n_folds} folds"
            )
        rng.shuffle(members)
        for idx in members:
            assignments[idx] = pointer % n_folds
            pointer += 1
    return FoldPlan(n_folds=n_folds, assignments=assignments, seed=seed)


def _stratified_holdout(indices, y, fraction, rng):
    """Split indices into (train, val) with per-class proportional sampling."""
    val = []
    for cls in np.unique(y[indices]):
        members = indices[y[indices] == cls]
        members = members.copy()
        rng.shuffle(members)
        n_val = max(1, int(round(fraction * len(members)))) if len(members) > 1 else 0
        val.extend(members[:n_val])
    val = np.array(sorted(val), dtype=np.intp)
    train = np.setdiff1d(indices, val)
    return train, val


# --- metrics ---------------------------------------------------------------

def roc_auc_ovr(scores, labels):
    """(macro AUC, per-class AUC) via the rank statistic with tie correction."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise SingleClassEval("need >= 2 classes in the evaluation set")
    per_class = {}
    for cls in classes:
        pos = labels == cls
        n_pos = int(pos.sum())
        n_neg = len(labels) - n_pos
        ranks = rankdata(scores[:, int(cls)])  # average ranks: ties count 1/2
        auc = (ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
        per_class[int(cls)] = float(auc)
    macro = float(np.mean(list(per_class.values())))
    return macro, per_class


def macro_f1(predictions, labels):
    """Unweighted mean of per-class F1 over classes present in ``labels``; 0/0 -> 0."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    f1s = []
    for cls in np.unique(labels):
        tp = np.sum((predictions == cls) & (labels == cls))
        fp = np.sum((predictions == cls) & (labels != cls))
        fn = np.sum((predictions != cls) & (labels == cls))
        denom = 2 * tp + fp + fn
        f1s.append(2.0 * tp / denom if denom > 0 else 0.0)
    return float(np.mean(f1s))


def roc_curve(scores, positives):
    """(fpr, tpr) points, monotone in fpr, from descending score thresholds."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    order = np.argsort(-scores, kind="stable")
    y = positives[order]
    tps = np.cumsum(y)
    fps = np.cumsum(~y)
    # Collapse runs of tied scores to one point.
    distinct = np.where(np.diff(scores[order]))[0]
    idx = np.concatenate([distinct, [len(y) - 1]])
    n_pos = max(int(positives.sum()), 1)
    n_neg = max(int((~positives).sum()), 1)
    fpr = np.concatenate([[0.0], fps[idx] / n_neg])
    tpr = np.concatenate([[0.0], tps[idx] / n_pos])
    return fpr, tpr


@dataclass
class EvalResult:
    fold_auc: list
    fold_f1: list
    per_class_auc: dict
    roc_points: dict            # class -> {"fpr": [...], "tpr": [...]} from pooled scores
    mode: str = ""
    layer_kind: str = ""

    @property
    def mean_auc(self):
        return float(np.mean(self.fold_auc))

    @property
    def std_auc(self):
        return float(np.std(self.fold_auc))

    @property
    def mean_f1(self):
        return float(np.mean(self.fold_f1))

    @property
    def std_f1(self):
        return float(np.std(self.fold_f1))

    def to_dict(self):
        return {
            "mode": self.mode,
            "layer_kind": self.layer_kind,
            "fold_auc": [float(x) for x in self.fold_auc],
            "fold_f1": [float(x) for x in self.fold_f1],
            "mean_auc": self.mean_auc,
            "std_auc": self.std_auc,
            "mean_f1": self.mean_f1,
            "std_f1": self.std_f1,
            "per_class_auc": {str(k): float(v) for k, v in self.per_class_auc.items()},
            "roc_points": self.roc_points,
        }


# --- training --------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 1e-2
    max_epochs: int = 200
    patience: int = 20
    val_fraction: float = 0.1
    seed: int = 0


def class_weights(y, n_classes):
    """Inverse-frequency weights normalized to mean 1 over present classes."""
    counts = np.bincount(y, minlength=n_classes).astype(np.float64)
    w = np.zeros(n_classes)
    present = counts > 0
    w[present] = counts[present].sum() / (present.sum() * counts[present])
    return w


def _forward(model, data, training=False, rng=None):
    return hierarchical_forward(
        model, data.X, data.graphs, sim_features=data.sim_features,
        training=training, rng=rng,
    )


def train_model(data, arch, train_idx, mode="hierarchical", train_cfg=None):
    """Transductive training masked to ``train_idx``.

    Returns (best ModelBundle by internal-validation loss, history dict).
    """
    cfg = train_cfg or TrainConfig()
    rng = np.random.default_rng(cfg.seed)
    n_classes = len(data.classes)
    sim_feat_dim = data.sim_features.shape[1] if data.sim_features is not None else None
    d_in = data.X.shape[1]
    model = init_model(
        arch, d_in, n_classes, mode=mode, sim_feat_dim=sim_feat_dim, seed=cfg.seed
    )
    params = model.param_list()
    state = ad.AdamState(params, lr=cfg.lr)

    train_idx = np.asarray(train_idx, dtype=np.intp)
    inner_train, inner_val = _stratified_holdout(train_idx, data.y, cfg.val_fraction, rng)
    if len(inner_val) == 0:
        inner_val = inner_train
    weights = class_weights(data.y[inner_train], n_classes)

    drop_rng = np.random.default_rng(cfg.seed + 1)
    history = {"train_loss": [], "val_loss": [], "best_epoch": 0}
    best_val = np.inf
    best_params = {p.name: p.data.copy() for p in params}
    stale = 0

    for epoch in range(cfg.max_epochs):
        ad.zero_grads(params)
        logits = _forward(model, data, training=True, rng=drop_rng)
        loss = ad.cross_entropy(
            ad.gather_rows(logits, inner_train), data.y[inner_train], weights
        )
        if not np.isfinite(loss.data):
            raise NonFiniteLoss(f"non-finite training loss at epoch {epoch}")
        loss.backward()
        ad.adam_step(params, state)

        val_logits = _forward(model, data, training=False)
        val_loss = ad.cross_entropy(
            ad.gather_rows(val_logits, inner_val), data.y[inner_val], weights
        )
        history["train_loss"].append(float(loss.data))
        history["val_loss"].append(float(val_loss.data))

        if val_loss.data < best_val - 1e-12:
            best_val = float(val_loss.data)
            best_params = {p.name: p.data.copy() for p in params}
            history["best_epoch"] = epoch
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break

    for p in params:
        p.data[...] = best_params[p.name]
    return model, history


def predict_proba(model, data):
    logits = _forward(model, data, training=False)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_validate(data, arch, folds, mode="hierarchical", train_cfg=None):
    """Train per fold and score held-out patients; pooled scores feed the ROC points."""
    cfg = train_cfg or TrainConfig()
    n = len(data.y)
    pooled = np.zeros((n, len(data.classes)))
    fold_auc, fold_f1 = [], []
    per_class_acc = {}
    for fold_id in range(folds.n_folds):
        fold_cfg = TrainConfig(
            lr=cfg.lr, max_epochs=cfg.max_epochs, patience=cfg.patience,
            val_fraction=cfg.val_fraction, seed=cfg.seed * 1000 + fold_id,
        )
        model, _ = train_model(data, arch, folds.train_indices(fold_id), mode, fold_cfg)
        proba = predict_proba(model, data)
        test = folds.test_indices(fold_id)
        pooled[test] = proba[test]
        auc, per_class = roc_auc_ovr(proba[test], data.y[test])
        f1 = macro_f1(proba[test].argmax(axis=1), data.y[test])
        fold_auc.append(auc)
        fold_f1.append(f1)
        for k, v in per_class.items():
            per_class_acc.setdefault(k, []).append(v)

    roc_points = {}
    for cls in range(len(data.classes)):
        if (data.y == cls).any():
            fpr, tpr = roc_curve(pooled[:, cls], data.y == cls)
            roc_points[str(cls)] = {
                "fpr": [round(float(x), 9) for x in fpr],
                "tpr": [round(float(x), 9) for x in tpr],
            }
    return EvalResult(
        fold_auc=fold_auc,
        fold_f1=fold_f1,
        per_class_auc={k: float(np.mean(v)) for k, v in per_class_acc.items()},
        roc_points=roc_points,
        mode=mode,
        layer_kind=arch.layer_kind,
    )


def run_ablation(data, arch, folds, train_cfg=None):
    """Similarity-only, PPI-only, and full hierarchical runs on identical folds."""
    return {
        "sim_only": cross_validate(data, arch, folds, "sim_only", train_cfg),
        "ppi_only": cross_validate(data, arch, folds, "ppi_only", train_cfg),
        "hierarchical": cross_validate(data, arch, folds, "hierarchical", train_cfg),
    }


# --- baselines -------------------------------------------------------------

def _mlp_forward(params, x, n_layers):
    h = x
    for i in range(n_layers):
        h = ad.add(ad.matmul(h, params[f"l{i}.W"]), params[f"l{i}.b"])
        if i < n_layers - 1:
            h = ad.relu(h)
    return h


def baseline_mlp(features, y, folds, n_layers=3, hidden=64, train_cfg=None):
    """Flattened-feature MLP baseline (n_layers affine layers, ReLU between)."""
    cfg = train_cfg or TrainConfig()
    features = standardize(np.asarray(features, dtype=np.float64))
    y = np.asarray(y)
    n_classes = int(y.max()) + 1
    n = len(y)
    pooled = np.zeros((n, n_classes))
    fold_auc, fold_f1 = [], []
    per_class_acc = {}
    for fold_id in range(folds.n_folds):
        rng = np.random.default_rng(cfg.seed * 1000 + fold_id)
        dims = [features.shape[1]] + [hidden] * (n_layers - 1) + [n_classes]
        params = {}
        for i in range(n_layers):
            params[f"l{i}.W"] = ad.Parameter(
                ad.glorot_uniform((dims[i], dims[i + 1]), rng), f"l{i}.W"
            )
            params[f"l{i}.b"] = ad.Parameter(np.zeros((1, dims[i + 1])), f"l{i}.b")
        plist = [params[k] for k in sorted(params)]
        state = ad.AdamState(plist, lr=cfg.lr)

        train_idx = folds.train_indices(fold_id)
        inner_train, inner_val = _stratified_holdout(train_idx, y, cfg.val_fraction, rng)
        if len(inner_val) == 0:
            inner_val = inner_train
        weights = class_weights(y[inner_train], n_classes)
        xt = Tensor(features)
        best_val, stale = np.inf, 0
        best = {p.name: p.data.copy() for p in plist}
        for epoch in range(cfg.max_epochs):
            ad.zero_grads(plist)
            logits = _mlp_forward(params, xt, n_layers)
            loss = ad.cross_entropy(ad.gather_rows(logits, inner_train), y[inner_train], weights)
            if not np.isfinite(loss.data):
                raise NonFiniteLoss(f"non-finite MLP loss at epoch {epoch}")
            loss.backward()
            ad.adam_step(plist, state)
            val = ad.cross_entropy(
                ad.gather_rows(_mlp_forward(params, xt, n_layers), inner_val),
                y[inner_val], weights,
            )
            if val.data < best_val - 1e-12:
                best_val, stale = float(val.data), 0
                best = {p.name: p.data.copy() for p in plist}
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
        for p in plist:
            p.data[...] = best[p.name]

        logits = _mlp_forward(params, xt, n_layers).data
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        proba = e / e.sum(axis=1, keepdims=True)
        test = folds.test_indices(fold_id)
        pooled[test] = proba[test]
        auc, per_class = roc_auc_ovr(proba[test], y[test])
        fold_auc.append(auc)
        fold_f1.append(macro_f1(proba[test].argmax(axis=1), y[test]))
        for k, v in per_class.items():
            per_class_acc.setdefault(k, []).append(v)
    return EvalResult(
        fold_auc=fold_auc, fold_f1=fold_f1,
        per_class_auc={k: float(np.mean(v)) for k, v in per_class_acc.items()},
        roc_points={}, mode=f"mlp{n_layers}", layer_kind="mlp",
    )


def fit_penalized_logistic(x, y, n_classes, lam=1e-2, l1_ratio=0.5, lr=0.1, iters=500):
    """Multinomial logistic regression by proximal gradient.

    L2 part of the elastic-net penalty enters the gradient; the L1 part is a
    soft-threshold proximal step.  The intercept is unpenalized.
    """
    n, d = x.shape
    w = np.zeros((d, n_classes))
    b = np.zeros((1, n_classes))
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y] = 1.0
    for _ in range(iters):
        logits = x @ w + b
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        p = e / e.sum(axis=1, keepdims=True)
        gw = x.T @ (p - onehot) / n + lam * (1.0 - l1_ratio) * w
        gb = (p - onehot).sum(axis=0, keepdims=True) / n
        w -= lr * gw
        b -= lr * gb
        thresh = lr * lam * l1_ratio
        w = np.sign(w) * np.maximum(np.abs(w) - thresh, 0.0)
    return w, b


def baseline_penalized_logistic(features, y, folds, lam=1e-2, l1_ratio=0.5):
    """Elastic-net logistic baseline (l1_ratio=1 gives the pure L1 variant)."""
    features = standardize(np.asarray(features, dtype=np.float64))
    y = np.asarray(y)
    n_classes = int(y.max()) + 1
    pooled = np.zeros((len(y), n_classes))
    fold_auc, fold_f1 = [], []
    per_class_acc = {}
    for fold_id in range(folds.n_folds):
        train_idx = folds.train_indices(fold_id)
        w, b = fit_penalized_logistic(
            features[train_idx], y[train_idx], n_classes, lam=lam, l1_ratio=l1_ratio
        )
        logits = features @ w + b
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        proba = e / e.sum(axis=1, keepdims=True)
        test = folds.test_indices(fold_id)
        pooled[test] = proba[test]
        auc, per_class = roc_auc_ovr(proba[test], y[test])
        fold_auc.append(auc)
        fold_f1.append(macro_f1(proba[test].argmax(axis=1), y[test]))
        for k, v in per_class.items():
            per_class_acc.setdefault(k, []).append(v)
    return EvalResult(
        fold_auc=fold_auc, fold_f1=fold_f1,
        per_class_auc={k: float(np.mean(v)) for k, v in per_class_acc.items()},
        roc_points={}, mode=f"logistic_l1r{l1_ratio}", layer_kind="linear",
    )
