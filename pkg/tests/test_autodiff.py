import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cohortgnn import autodiff as ad
from cohortgnn.autodiff import Parameter, Tensor
from cohortgnn.errors import LabelOutOfRange


def rng_for(seed=0):
    return np.random.default_rng(seed)


def check(f, x, tol=1e-7):
    result = ad.grad_check(f, x, tol=tol)
    assert result["passed"], result["max_rel_err"]


def test_matmul_grad():
    rng = rng_for(1)
    b = Tensor(rng.normal(size=(4, 3)))
    check(lambda x: ad.sum_all(ad.matmul(x, b)), rng.normal(size=(5, 4)))


def test_add_broadcast_bias_grad():
    rng = rng_for(2)
    bias = Tensor(rng.normal(size=(1, 3)), requires_grad=True)
    check(lambda x: ad.sum_all(ad.add(x, bias)), rng.normal(size=(5, 3)))
    # and gradient wrt the bias row itself
    x = Tensor(rng_for(3).normal(size=(5, 3)))
    check(lambda b: ad.sum_all(ad.add(x, b)), rng.normal(size=(1, 3)))


def test_elementwise_grads():
    rng = rng_for(4)
    x0 = rng.normal(size=(4, 4)) + 3.0  # keep log/power away from 0
    check(lambda x: ad.sum_all(ad.log(x)), x0)
    check(lambda x: ad.sum_all(ad.exp(x)), rng.normal(size=(3, 3)))
    check(lambda x: ad.sum_all(ad.power(x, -0.5)), x0)
    check(lambda x: ad.sum_all(ad.sigmoid(x)), rng.normal(size=(3, 4)))
    check(lambda x: ad.sum_all(ad.tanh(x)), rng.normal(size=(3, 4)))
    check(lambda x: ad.mean_all(ad.mul(x, x)), rng.normal(size=(3, 4)))


def test_leaky_relu_matches_definition():
    x = Tensor(np.array([[-2.0, 0.5]]))
    out = ad.leaky_relu(x, 0.2)
    assert np.allclose(out.data, [[-0.4, 0.5]])


def test_softmax_rows_sum_to_one_and_grad():
    rng = rng_for(5)
    x = rng.normal(size=(6, 4))
    s = ad.softmax_rows(Tensor(x))
    assert np.allclose(s.data.sum(axis=1), 1.0)
    w = Tensor(rng.normal(size=(6, 4)))
    check(lambda t: ad.sum_all(ad.mul(ad.softmax_rows(t), w)), x)


def test_gather_scatter_grads():
    rng = rng_for(6)
    idx = np.array([0, 2, 2, 1])
    check(lambda x: ad.sum_all(ad.mul(ad.gather_rows(x, idx), ad.gather_rows(x, idx))),
          rng.normal(size=(3, 2)))
    w = Tensor(rng.normal(size=(5, 2)))
    check(lambda x: ad.sum_all(ad.mul(ad.scatter_add_rows(x, idx, 5), w)),
          rng.normal(size=(4, 2)))


def test_segment_reduce_modes():
    x = np.array([[1.0], [5.0], [2.0], [4.0], [3.0], [0.0]])
    t = Tensor(x)
    assert np.allclose(ad.segment_reduce(t, 2, "max").data, [[5.0], [4.0]])
    assert np.allclose(ad.segment_reduce(t, 2, "mean").data, [[8 / 3], [7 / 3]])
    assert np.allclose(ad.segment_reduce(t, 2, "sum").data, [[8.0], [7.0]])


def test_segment_reduce_grads():
    rng = rng_for(7)
    w = Tensor(rng.normal(size=(3, 2)))
    for mode in ("max", "mean", "sum"):
        check(lambda x, m=mode: ad.sum_all(ad.mul(ad.segment_reduce(x, 3, m), w)),
              rng.normal(size=(12, 2)))


def test_batched_block_matmul_matches_loop():
    rng = rng_for(8)
    op = rng.normal(size=(4, 4))
    h = rng.normal(size=(12, 3))
    out = ad.batched_block_matmul(op, Tensor(h), 3)
    expected = np.vstack([op @ h[i * 4:(i + 1) * 4] for i in range(3)])
    assert np.allclose(out.data, expected)
    w = Tensor(rng.normal(size=(12, 3)))
    check(lambda x: ad.sum_all(ad.mul(ad.batched_block_matmul(op, x, 3), w)), h)


def test_concat_and_reshape_grads():
    rng = rng_for(9)
    other = Tensor(rng.normal(size=(2, 3)))
    w_rows = Tensor(rng.normal(size=(5, 3)))
    check(lambda x: ad.sum_all(ad.mul(ad.concat_rows([x, other]), w_rows)),
          rng.normal(size=(3, 3)))
    w_cols = Tensor(rng.normal(size=(2, 7)))
    check(lambda x: ad.sum_all(ad.mul(ad.concat_cols([x, other]), w_cols)),
          rng.normal(size=(2, 4)))
    w_rs = Tensor(rng.normal(size=(6, 2)))
    check(lambda x: ad.sum_all(ad.mul(ad.reshape(x, (6, 2)), w_rs)),
          rng.normal(size=(3, 4)))
    w_t = Tensor(rng.normal(size=(4, 3)))
    check(lambda x: ad.sum_all(ad.mul(ad.transpose2d(x), w_t)),
          rng.normal(size=(3, 4)))


def test_mul_rowvec_colvec_grads():
    rng = rng_for(10)
    v = Tensor(rng.normal(size=(1, 4)))
    check(lambda x: ad.sum_all(ad.mul_rowvec(x, v)), rng.normal(size=(3, 4)))
    c = Tensor(rng.normal(size=(3, 1)))
    check(lambda x: ad.sum_all(ad.mul_colvec(x, c)), rng.normal(size=(3, 4)))
    x = Tensor(rng.normal(size=(3, 4)))
    check(lambda vv: ad.sum_all(ad.mul_rowvec(x, vv)), rng.normal(size=(1, 4)))
    check(lambda cc: ad.sum_all(ad.mul_colvec(x, cc)), rng.normal(size=(3, 1)))


def test_cross_entropy_matches_manual():
    rng = rng_for(11)
    logits = rng.normal(size=(6, 3))
    y = np.array([0, 1, 2, 0, 1, 2])
    loss = ad.cross_entropy(Tensor(logits), y)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    assert abs(float(loss.data) - (-logp[np.arange(6), y].mean())) < 1e-12


def test_cross_entropy_class_weights_and_grad():
    rng = rng_for(12)
    y = np.array([0, 1, 1, 2])
    w = np.array([2.0, 0.5, 0.5])
    check(lambda x: ad.cross_entropy(x, y, w), rng.normal(size=(4, 3)))


def test_cross_entropy_soft_targets():
    rng = rng_for(13)
    targets = np.array([[0.7, 0.3], [0.2, 0.8]])
    check(lambda x: ad.cross_entropy(x, targets), rng.normal(size=(2, 2)))


def test_cross_entropy_label_out_of_range():
    with pytest.raises(LabelOutOfRange):
        ad.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_dropout_eval_is_identity_and_train_scales():
    rng = rng_for(14)
    x = Tensor(np.ones((1000, 1)))
    out = ad.dropout(x, 0.5, rng, training=False)
    assert out is x or np.array_equal(out.data, x.data)
    out = ad.dropout(x, 0.5, np.random.default_rng(0), training=True)
    kept = out.data[out.data != 0]
    assert np.allclose(kept, 2.0)           # inverted dropout scaling
    assert abs(out.data.mean() - 1.0) < 0.15


def test_backward_accumulates_over_reused_nodes():
    x = Tensor(np.array([[2.0]]), requires_grad=True)
    y = ad.add(ad.mul(x, x), x)  # x^2 + x, dy/dx = 2x + 1 = 5
    ad.sum_all(y).backward()
    assert np.allclose(x.grad, [[5.0]])


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_random_composite_grads(seed):
    rng = np.random.default_rng(seed)
    w = Tensor(rng.normal(size=(3, 2)))
    check(lambda x: ad.mean_all(ad.tanh(ad.matmul(x, w))), rng.normal(size=(4, 3)))


def test_adam_minimizes_quadratic():
    p = Parameter(np.array([[5.0, -3.0]]), "p")
    state = ad.AdamState([p], lr=0.1)
    for _ in range(500):
        ad.zero_grads([p])
        loss = ad.sum_all(ad.mul(p, p))
        loss.backward()
        ad.adam_step([p], state)
    assert np.all(np.abs(p.data) < 1e-2)


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = rng_for(15)
    params = [
        Parameter(rng.normal(size=(7, 3)), "a.W"),
        Parameter(rng.normal(size=(1, 3)), "a.b"),
    ]
    path = tmp_path / "model.bin"
    ad.save_checkpoint(path, params, {"note": "x"}, seed=42)
    loaded, config, seed = ad.load_checkpoint(path)
    assert seed == 42 and config == {"note": "x"}
    for p in params:
        assert np.array_equal(loaded[p.name].data, p.data)


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"nope" + b"\x00" * 16)
    with pytest.raises(ValueError):
        ad.load_checkpoint(path)


def test_glorot_limits():
    rng = rng_for(16)
    w = ad.glorot_uniform((100, 50), rng)
    limit = np.sqrt(6.0 / 150)
    assert np.all(np.abs(w) <= limit)
    assert w.std() > 0.1 * limit
