"""Minimal dense tensor engine with reverse-mode automatic differentiation.

Tensors wrap float64 numpy arrays and record their parents on a tape-free
DAG; calling ``backward()`` on a scalar walks the graph in reverse
topological order and accumulates gradients.  Only the operations needed by
the graph models in this package are implemented: dense matmul, elementwise
arithmetic, row/column-broadcast products, gather/scatter over row indices,
segment reductions, and the usual activations.

Everything runs on one thread per graph; tensors that do not require
gradients are safe to share between graphs.
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

from .errors import (
    LabelOutOfRange,
    NonFiniteDetected,
    ShapeMismatch,
)


class Tensor:
    """A dense float64 array plus the bookkeeping for reverse-mode AD."""

    __slots__ = ("data", "grad", "requires_grad", "_parents")

    def __init__(self, data, requires_grad=False, parents=()):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        # parents: tuple of (Tensor, fn) where fn maps the incoming gradient
        # to this node into the gradient contribution for that parent.
        self._parents = tuple(parents)

    @property
    def shape(self):
        return self.data.shape

    def detach(self):
        return Tensor(self.data.copy())

    def backward(self):
        if self.data.size != 1:
            raise ShapeMismatch("backward() requires a scalar tensor")
        # Reverse topological order via iterative DFS.
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent, _ in node._parents:
                if id(parent) not in seen and parent._needs_grad():
                    stack.append((parent, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            for parent, fn in node._parents:
                if not parent._needs_grad():
                    continue
                contrib = fn(g)
                if id(parent) in grads:
                    grads[id(parent)] += contrib
                else:
                    grads[id(parent)] = np.array(contrib, dtype=np.float64, copy=True)

    def _needs_grad(self):
        return self.requires_grad or bool(self._parents)

    # Convenience operators; scalars only for * and +.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul_scalar(other, -1.0))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A named trainable tensor."""

    __slots__ = ("name",)

    def __init__(self, data, name):
        super().__init__(data, requires_grad=True)
        self.name = name

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _track(parents):
    return tuple(p for p in parents if p[0]._needs_grad())


# --- core ops --------------------------------------------------------------

def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch(f"matmul {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data
    parents = _track([
        (a, lambda g, bd=b.data: g @ bd.T),
        (b, lambda g, ad=a.data: ad.T @ g),
    ])
    return Tensor(out, parents=parents)


def add(a, b):
    """Elementwise sum; also supports adding a (1, d) bias row to (n, d)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape == b.data.shape:
        parents = _track([(a, lambda g: g), (b, lambda g: g)])
        return Tensor(a.data + b.data, parents=parents)
    if (
        a.data.ndim == 2
        and b.data.ndim == 2
        and b.data.shape == (1, a.data.shape[1])
    ):
        parents = _track([
            (a, lambda g: g),
            (b, lambda g: g.sum(axis=0, keepdims=True)),
        ])
        return Tensor(a.data + b.data, parents=parents)
    raise ShapeMismatch(f"add {a.data.shape} + {b.data.shape}")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeMismatch(f"mul {a.data.shape} * {b.data.shape}")
    parents = _track([
        (a, lambda g, bd=b.data: g * bd),
        (b, lambda g, ad=a.data: g * ad),
    ])
    return Tensor(a.data * b.data, parents=parents)


def mul_scalar(a, c):
    a = _as_tensor(a)
    c = float(c)
    parents = _track([(a, lambda g: g * c)])
    return Tensor(a.data * c, parents=parents)


def mul_rowvec(a, v):
    """(n, d) * (1, d), broadcasting the row vector over rows."""
    a, v = _as_tensor(a), _as_tensor(v)
    if a.data.ndim != 2 or v.data.shape != (1, a.data.shape[1]):
        raise ShapeMismatch(f"mul_rowvec {a.data.shape} * {v.data.shape}")
    parents = _track([
        (a, lambda g, vd=v.data: g * vd),
        (v, lambda g, ad=a.data: (g * ad).sum(axis=0, keepdims=True)),
    ])
    return Tensor(a.data * v.data, parents=parents)


def mul_colvec(a, v):
    """(n, d) * (n, 1), broadcasting the column vector over columns."""
    a, v = _as_tensor(a), _as_tensor(v)
    if a.data.ndim != 2 or v.data.shape != (a.data.shape[0], 1):
        raise ShapeMismatch(f"mul_colvec {a.data.shape} * {v.data.shape}")
    parents = _track([
        (a, lambda g, vd=v.data: g * vd),
        (v, lambda g, ad=a.data: (g * ad).sum(axis=1, keepdims=True)),
    ])
    return Tensor(a.data * v.data, parents=parents)


def concat_rows(tensors):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.data.shape[0] for t in tensors]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    out = np.concatenate([t.data for t in tensors], axis=0)
    parents = []
    for i, t in enumerate(tensors):
        lo, hi = int(offsets[i]), int(offsets[i + 1])
        parents.append((t, lambda g, lo=lo, hi=hi: g[lo:hi]))
    return Tensor(out, parents=_track(parents))


def concat_cols(tensors):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.data.shape[1] for t in tensors]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    out = np.concatenate([t.data for t in tensors], axis=1)
    parents = []
    for i, t in enumerate(tensors):
        lo, hi = int(offsets[i]), int(offsets[i + 1])
        parents.append((t, lambda g, lo=lo, hi=hi: g[:, lo:hi]))
    return Tensor(out, parents=_track(parents))


def reshape(a, shape):
    a = _as_tensor(a)
    orig = a.data.shape
    parents = _track([(a, lambda g: g.reshape(orig))])
    return Tensor(a.data.reshape(shape), parents=parents)


def transpose2d(a):
    a = _as_tensor(a)
    parents = _track([(a, lambda g: g.T)])
    return Tensor(a.data.T, parents=parents)


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0  # subgradient at 0 is 0
    parents = _track([(a, lambda g, m=mask: g * m)])
    return Tensor(np.where(mask, a.data, 0.0), parents=parents)


def leaky_relu(a, slope=0.2):
    a = _as_tensor(a)
    mask = a.data > 0
    factor = np.where(mask, 1.0, slope)
    parents = _track([(a, lambda g, f=factor: g * f)])
    return Tensor(a.data * factor, parents=parents)


def sigmoid(a):
    a = _as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    parents = _track([(a, lambda g, o=out: g * o * (1.0 - o))])
    return Tensor(out, parents=parents)


def tanh(a):
    a = _as_tensor(a)
    out = np.tanh(a.data)
    parents = _track([(a, lambda g, o=out: g * (1.0 - o * o))])
    return Tensor(out, parents=parents)


def log(a):
    a = _as_tensor(a)
    parents = _track([(a, lambda g, ad=a.data: g / ad)])
    return Tensor(np.log(a.data), parents=parents)


def exp(a):
    a = _as_tensor(a)
    out = np.exp(a.data)
    parents = _track([(a, lambda g, o=out: g * o)])
    return Tensor(out, parents=parents)


def power(a, p):
    a = _as_tensor(a)
    p = float(p)
    out = np.power(a.data, p)
    parents = _track([(a, lambda g, ad=a.data: g * p * np.power(ad, p - 1.0))])
    return Tensor(out, parents=parents)


def softmax_rows(a):
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def back(g, o=out):
        return (g - (g * o).sum(axis=1, keepdims=True)) * o

    return Tensor(out, parents=_track([(a, back)]))


def sum_all(a):
    a = _as_tensor(a)
    parents = _track([(a, lambda g, s=a.data.shape: np.full(s, float(g)))])
    return Tensor(a.data.sum(), parents=parents)


def mean_all(a):
    a = _as_tensor(a)
    n = a.data.size
    parents = _track([(a, lambda g, s=a.data.shape: np.full(s, float(g) / n))])
    return Tensor(a.data.mean(), parents=parents)


def gather_rows(a, idx):
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)

    def back(g, shape=a.data.shape, idx=idx):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return out

    return Tensor(a.data[idx], parents=_track([(a, back)]))


def scatter_add_rows(values, idx, n):
    """Rows of ``values`` accumulated into an (n, d) output at ``idx``."""
    values = _as_tensor(values)
    idx = np.asarray(idx, dtype=np.intp)
    out = np.zeros((n, values.data.shape[1]))
    np.add.at(out, idx, values.data)
    parents = _track([(values, lambda g, idx=idx: g[idx])])
    return Tensor(out, parents=parents)


def segment_reduce(a, n_segments, mode):
    """Reduce (n_segments * V, d) over equal-sized contiguous row blocks.

    Returns (n_segments, d).  ``mode`` is 'max', 'mean', or 'sum'.  Used as
    the READOUT over per-patient node embeddings stacked row-wise.
    """
    a = _as_tensor(a)
    n, d = a.data.shape
    if n % n_segments != 0:
        raise ShapeMismatch(f"segment_reduce: {n} rows not divisible by {n_segments}")
    v = n // n_segments
    blocks = a.data.reshape(n_segments, v, d)
    if mode == "sum":
        out = blocks.sum(axis=1)
        parents = _track([(a, lambda g: np.repeat(g, v, axis=0))])
    elif mode == "mean":
        out = blocks.mean(axis=1)
        parents = _track([(a, lambda g: np.repeat(g / v, v, axis=0))])
    elif mode == "max":
        arg = blocks.argmax(axis=1)  # ties routed to the first maximum
        out = np.take_along_axis(blocks, arg[:, None, :], axis=1)[:, 0, :]

        def back(g, arg=arg):
            gb = np.zeros((n_segments, v, d))
            s = np.arange(n_segments)[:, None]
            c = np.arange(d)[None, :]
            gb[s, arg, c] = g
            return gb.reshape(n, d)

        parents = _track([(a, back)])
    else:
        raise ShapeMismatch(f"unknown segment_reduce mode {mode!r}")
    return Tensor(out, parents=parents)


def batched_block_matmul(op, h, n_blocks):
    """Apply one (V, V) constant operator to every V-row block of ``h``.

    ``h`` has shape (n_blocks * V, d); the same dense propagation operator is
    applied independently per block.  ``op`` must not require gradients.
    """
    h = _as_tensor(h)
    op = np.asarray(op, dtype=np.float64)
    v = op.shape[0]
    n, d = h.data.shape
    if n != n_blocks * v:
        raise ShapeMismatch(f"batched_block_matmul: {n} rows vs {n_blocks}×{v}")
    out = (op @ h.data.reshape(n_blocks, v, d)).reshape(n, d)

    def back(g, opT=op.T):
        return (opT @ g.reshape(n_blocks, v, d)).reshape(n, d)

    return Tensor(out, parents=_track([(h, back)]))


def dropout(a, rate, rng, training):
    """Inverted dropout with an explicit generator; identity when not training."""
    a = _as_tensor(a)
    if not training or rate <= 0.0:
        return a
    keep = (rng.random(a.data.shape) >= rate) / (1.0 - rate)
    parents = _track([(a, lambda g, k=keep: g * k)])
    return Tensor(a.data * keep, parents=parents)


def cross_entropy(logits, labels, class_weights=None):
    """Weighted mean negative log-softmax of the true class.

    ``labels`` may be integer class indices (n,) or a soft/one-hot (n, C)
    target matrix.  Raises NonFiniteDetected when logits contain NaN/Inf,
    surfacing upstream numerical failures at loss evaluation.
    """
    logits = _as_tensor(logits)
    n, c = logits.data.shape
    if not np.isfinite(logits.data).all():
        raise NonFiniteDetected("non-finite logits at loss evaluation")

    labels_arr = np.asarray(labels)
    if labels_arr.ndim == 1:
        labels_arr = labels_arr.astype(np.intp)
        if labels_arr.min(initial=0) < 0 or labels_arr.max(initial=0) >= c:
            raise LabelOutOfRange(f"labels outside [0, {c})")
        target = np.zeros((n, c))
        target[np.arange(n), labels_arr] = 1.0
        if class_weights is not None:
            w = np.asarray(class_weights, dtype=np.float64)[labels_arr]
        else:
            w = np.ones(n)
    else:
        target = labels_arr.astype(np.float64)
        w = np.ones(n)

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    per_sample = -(target * logp).sum(axis=1)
    wsum = w.sum()
    loss = (w * per_sample).sum() / wsum

    softmax = np.exp(logp)

    def back(g, sm=softmax, t=target, w=w, wsum=wsum):
        return float(g) * (w[:, None] / wsum) * (sm - t)

    return Tensor(loss, parents=_track([(logits, back)]))


# --- initialization --------------------------------------------------------

def glorot_uniform(shape, rng):
    fan_in, fan_out = shape[0], shape[1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# --- optimizer -------------------------------------------------------------

class AdamState:
    """Per-parameter first/second moment buffers plus hyperparameters."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = {p.name: np.zeros_like(p.data) for p in params}
        self.v = {p.name: np.zeros_like(p.data) for p in params}


def adam_step(params, state):
    """One bias-corrected Adam update; parameters with no gradient are untouched."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for p in params:
        if p.grad is None:
            continue
        m = state.m[p.name]
        v = state.v[p.name]
        m *= b1
        m += (1.0 - b1) * p.grad
        v *= b2
        v += (1.0 - b2) * (p.grad * p.grad)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


def zero_grads(params):
    for p in params:
        p.grad = None


# --- gradient checking -----------------------------------------------------

def grad_check(f, x, eps=1e-5, tol=1e-4):
    """Compare reverse-mode gradients of scalar-valued ``f`` at ``x`` with
    central finite differences.

    Returns a dict with ``max_rel_err`` and ``passed``.  The relative error
    for each coordinate is |a - n| / max(1, |a|, |n|).
    """
    x = _as_tensor(x)
    x.requires_grad = True
    x.grad = None
    out = f(x)
    out.backward()
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(Tensor(x.data)).data)
        flat[i] = orig - eps
        lo = float(f(Tensor(x.data)).data)
        flat[i] = orig
        nflat[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    rel = np.abs(analytic - numeric) / denom
    max_rel = float(rel.max()) if rel.size else 0.0
    return {
        "max_rel_err": max_rel,
        "passed": max_rel <= tol,
        "analytic": analytic,
        "numeric": numeric,
    }


# --- checkpoint format -----------------------------------------------------

MAGIC = b"CGNN"


def save_checkpoint(path, params, config, seed):
    """Write parameters to ``model.bin``: JSON manifest + raw float64 buffers.

    Layout: 4-byte magic, little-endian uint64 manifest length, UTF-8 JSON
    manifest, then each buffer as little-endian float64 in manifest order.
    Round-trips are bit-exact.
    """
    manifest = {
        "format": 1,
        "seed": seed,
        "config": config,
        "tensors": [{"name": p.name, "shape": list(p.data.shape)} for p in params],
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for p in params:
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (params dict name->Parameter, config, seed)."""
    with open(path, "rb") as fh:
        data = fh.read()
    buf = io.BytesIO(data)
    if buf.read(4) != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (length,) = struct.unpack("<Q", buf.read(8))
    manifest = json.loads(buf.read(length).decode("utf-8"))
    params = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(buf.read(count * 8), dtype="<f8").reshape(shape).copy()
        params[entry["name"]] = Parameter(arr, entry["name"])
    return params, manifest["config"], manifest["seed"]
