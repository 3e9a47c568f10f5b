import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from dagpred import autodiff as ad
from dagpred.autodiff import SparsePattern, Tape, Tensor
from dagpred.errors import (
    DetachedGraph,
    EmptyRowMask,
    NonDeterministicFunction,
    NonFinite,
    NotScalar,
    ShapeMismatch,
)


def param(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def test_matmul_identity():
    m = np.arange(6.0).reshape(3, 2)
    assert np.array_equal(ad.matmul(np.eye(3), m).data, m)
    with pytest.raises(ShapeMismatch):
        ad.matmul(np.eye(3), np.ones((2, 2)))


def test_layer_norm_constant_row_is_zero():
    out = ad.layer_norm(np.full((2, 5), 3.7), np.ones(5), np.zeros(5))
    assert np.array_equal(out.data, np.zeros((2, 5)))


def test_relu_values():
    assert ad.relu(np.array([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_rank_limit():
    with pytest.raises(ShapeMismatch):
        Tensor(np.zeros((1, 1, 1, 1)))


def test_softmax_examples():
    out = ad.softmax_rows_masked(np.zeros((1, 2)), np.ones((1, 2), bool), 1.0).data
    assert out.tolist() == [[0.5, 0.5]]
    out = ad.softmax_rows_masked(np.array([[7.0, -3.0]]), np.array([[True, False]])).data
    assert out.tolist() == [[1.0, 0.0]]
    out = ad.softmax_rows_masked(np.array([[1.0, 2.0, 3.0]]), np.array([[True, False, True]])).data
    e1, e3 = math.exp(1), math.exp(3)
    np.testing.assert_allclose(out, [[e1 / (e1 + e3), 0.0, e3 / (e1 + e3)]], rtol=0, atol=1e-15)


def test_softmax_empty_row():
    with pytest.raises(EmptyRowMask):
        ad.softmax_rows_masked(np.zeros((2, 2)), np.array([[True, False], [False, False]]))


def test_softmax_masked_gradient_is_exactly_zero():
    rng = np.random.default_rng(0)
    logits = param(rng, 5, 5)
    mask = rng.random((5, 5)) < 0.4
    np.fill_diagonal(mask, True)
    out = ad.softmax_rows_masked(logits, mask, 2.0)
    w = rng.normal(size=(5, 5))
    ad.backward(ad.mean(ad.hadamard(out, w)))
    assert np.all(logits.grad[~mask] == 0.0)
    assert np.all(out.data[~mask] == 0.0)


def test_mse_examples():
    assert ad.mse_loss(np.array([1.0, 2.0]), np.array([1.0, 2.0])).data == 0.0
    assert ad.mse_loss(np.array([2.0]), np.array([0.0])).data == 4.0
    assert ad.mse_loss(np.array([1.0, 2, 3]), np.zeros(3)).data == pytest.approx(14 / 3, abs=1e-15)
    with pytest.raises(ShapeMismatch):
        ad.mse_loss(np.array([1.0, 2.0]), np.array([1.0]))


def test_backward_mean():
    w = Tensor(np.arange(4.0).reshape(2, 2), requires_grad=True)
    ad.backward(ad.mean(w))
    assert np.array_equal(w.grad, np.full((2, 2), 0.25))


def test_backward_chain_rule_and_accumulation():
    w = Tensor(np.array([[2.0]]), requires_grad=True)
    loss = ad.mse_loss(ad.matmul(np.array([[1.0]]), w), np.array([0.0]))
    loss.backward()
    assert w.grad.tolist() == [[4.0]]
    loss.backward()
    assert w.grad.tolist() == [[8.0]]
    w.zero_grad()
    assert w.grad is None


def test_backward_errors():
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(NotScalar):
        ad.backward(ad.scale(w, 2.0))
    with pytest.raises(DetachedGraph):
        ad.backward(ad.mean(np.ones(3)))
    with ad.no_grad():
        detached = ad.mean(w)
    with pytest.raises(DetachedGraph):
        ad.backward(detached)


def test_tape_visits_shared_nodes_once():
    rng = np.random.default_rng(1)
    w = param(rng, 3, 3)
    h = ad.relu(w)
    loss = ad.mean(ad.add(ad.hadamard(h, h), h))
    tape = Tape.from_output(loss)
    ids = [id(t) for t in tape]
    assert len(ids) == len(set(ids))
    pos = {id(t): i for i, t in enumerate(tape)}
    for t in tape:
        for p in t.parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(t)]
    loss.backward()
    expect = (2 * np.maximum(w.data, 0) + 1) * (w.data > 0) / 9
    np.testing.assert_allclose(w.grad, expect, atol=1e-15)


def test_dropout_identity_at_eval_and_rate_check():
    x = np.ones((4, 4))
    assert np.array_equal(ad.dropout(x, 0.5, train=False, seed=0).data, x)
    with pytest.raises(ValueError):
        ad.dropout(x, 1.0, train=True, seed=0)


def test_dropout_expectation():
    out = ad.dropout(np.ones(100_000), 0.5, train=True, seed=123).data
    assert abs(out.mean() - 1.0) < 0.01
    assert set(np.unique(out)) <= {0.0, 2.0}


def test_dropout_is_seeded():
    a = ad.dropout(np.ones(50), 0.3, train=True, seed=9).data
    b = ad.dropout(np.ones(50), 0.3, train=True, seed=9).data
    assert np.array_equal(a, b)


def test_non_finite_is_an_error():
    with pytest.raises(NonFinite):
        ad.mean(np.array([np.inf, 1.0]))
    with pytest.raises(NonFinite):
        ad.mse_loss(np.array([np.nan]), np.array([0.0]))


def test_finite_diff_quadratic():
    w = Tensor(np.array([3.0]), requires_grad=True)
    rep = ad.finite_diff_check(lambda: ad.mean(ad.hadamard(w, w)), {"w": w}, h=1e-5, tol=1e-8)
    assert rep.passed and abs(w.grad[0] - 6.0) < 1e-12


def test_finite_diff_relu_away_from_zero():
    w = Tensor(np.array([0.7, -1.3, 2.1]), requires_grad=True)
    rep = ad.finite_diff_check(lambda: ad.mean(ad.relu(w)), {"w": w}, tol=1e-6)
    assert rep.passed


def test_finite_diff_rejects_bad_h_and_nondeterminism():
    w = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        ad.finite_diff_check(lambda: ad.mean(w), {"w": w}, h=1e-2)
    rng = np.random.default_rng(0)
    with pytest.raises(NonDeterministicFunction):
        ad.finite_diff_check(lambda: ad.mean(ad.dropout(w, 0.5, True, rng)), {"w": w})


def test_finite_diff_catches_a_wrong_gradient():
    w = Tensor(np.array([1.5, -0.5]), requires_grad=True)

    def bad():
        out = ad.scale(w, 3.0)
        return ad.mean(ad._result(out.data, (w,), lambda g: (g * 2.0,), "bad"))

    assert not ad.finite_diff_check(bad, {"w": w}).passed


def _primitive_losses(rng):
    """(name, loss closure, params) covering every primitive."""
    a, b = param(rng, 4, 3), param(rng, 3, 5)
    x3, w2 = param(rng, 2, 4, 3), param(rng, 3, 2)
    c, sq = param(rng, 4, 3), param(rng, 3, 3)
    bias = param(rng, 3)
    g, be = param(rng, 3), param(rng, 3)
    logits = param(rng, 4, 4)
    mask = rng.random((4, 4)) < 0.5
    np.fill_diagonal(mask, True)
    agg = sp.random(4, 4, density=0.5, random_state=3, format="csr")
    weights = np.arange(16.0).reshape(4, 4)
    tgt = rng.normal(size=12)
    return [
        ("matmul", lambda: ad.mean(ad.hadamard(ad.matmul(a, b), ad.matmul(a, b))), {"a": a, "b": b}),
        ("matmul3d", lambda: ad.mean(ad.relu(ad.matmul(x3, w2))), {"x": x3, "w": w2}),
        ("linear", lambda: ad.mse_loss(ad.linear(a, sq, bias), tgt), {"a": a, "w": sq, "bias": bias}),
        ("add_broadcast", lambda: ad.mean(ad.hadamard(ad.add(a, bias), ad.add(a, bias))),
         {"a": a, "bias": bias}),
        ("hadamard", lambda: ad.mean(ad.hadamard(ad.hadamard(a, c), a)), {"a": a, "c": c}),
        ("concat", lambda: ad.mse_loss(ad.concat_cols([a, c]), np.zeros(24)), {"a": a, "c": c}),
        ("transpose_scale",
         lambda: ad.mean(ad.hadamard(ad.scale(ad.transpose(a), 1.7), ad.transpose(c))),
         {"a": a, "c": c}),
        ("layer_norm", lambda: ad.mse_loss(ad.layer_norm(a, g, be), tgt), {"a": a, "g": g, "b": be}),
        ("softmax", lambda: ad.mean(ad.hadamard(ad.softmax_rows_masked(logits, mask, 1.3), weights)),
         {"l": logits}),
        ("aggregate", lambda: ad.mse_loss(ad.aggregate(agg, a), tgt), {"a": a}),
        ("reshape", lambda: ad.mse_loss(ad.reshape(a, (12,)), tgt), {"a": a}),
    ]


@pytest.mark.parametrize("idx", range(11))
def test_primitive_gradients(idx):
    name, f, params = _primitive_losses(np.random.default_rng(idx))[idx]
    rep = ad.finite_diff_check(f, params, h=1e-5, tol=1e-4)
    assert rep.passed, (name, rep)


def _dense_attention(q, k, v, masks, scale):
    heads = len(masks)
    hd = q.shape[1] // heads
    outs = []
    for i, m in enumerate(masks):
        sl = slice(i * hd, (i + 1) * hd)
        s = ad.matmul(_cols(q, sl), ad.transpose(_cols(k, sl)))
        outs.append(ad.matmul(ad.softmax_rows_masked(s, m, scale), _cols(v, sl)))
    return ad.concat_cols(outs)


def _cols(t, sl):
    sel = np.zeros((t.shape[1], sl.stop - sl.start))
    sel[np.arange(sl.start, sl.stop), np.arange(sl.stop - sl.start)] = 1.0
    return ad.matmul(t, sel)


@given(st.integers(1, 9), st.integers(0, 10_000))
def test_sparse_attention_matches_dense(n, seed):
    rng = np.random.default_rng(seed)
    q, k, v = param(rng, n, 8), param(rng, n, 8), param(rng, n, 8)
    masks = []
    for _ in range(4):
        m = rng.random((n, n)) < 0.4
        np.fill_diagonal(m, True)
        masks.append(m)
    pats = [SparsePattern.from_dense(m) for m in masks]
    w = rng.normal(size=(n, 8))
    sparse = ad.masked_attention(q, k, v, pats, math.sqrt(2.0))
    ad.backward(ad.mean(ad.hadamard(sparse, w)))
    grads = [t.grad.copy() for t in (q, k, v)]
    for t in (q, k, v):
        t.zero_grad()
    dense = _dense_attention(q, k, v, masks, math.sqrt(2.0))
    ad.backward(ad.mean(ad.hadamard(dense, w)))
    np.testing.assert_allclose(sparse.data, dense.data, atol=1e-12)
    for g_sparse, t in zip(grads, (q, k, v)):
        np.testing.assert_allclose(g_sparse, t.grad, atol=1e-12)


def test_sparse_attention_gradient_with_fixed_dropout():
    rng = np.random.default_rng(4)
    q, k, v = param(rng, 6, 8), param(rng, 6, 8), param(rng, 6, 8)
    pats = [SparsePattern.from_dense(np.tril(np.ones((6, 6), bool)))] * 4

    def f():
        out = ad.masked_attention(q, k, v, pats, 2.0, dropout_p=0.3, rng=np.random.default_rng(7))
        return ad.mse_loss(out, np.ones(48))

    assert ad.finite_diff_check(f, {"q": q, "k": k, "v": v}, tol=1e-6).passed


def test_sparse_attention_empty_row():
    pat = SparsePattern.from_dense(np.array([[True, False], [False, False]]))
    with pytest.raises(EmptyRowMask):
        ad.masked_attention(np.ones((2, 4)), np.ones((2, 4)), np.ones((2, 4)), [pat], 1.0)


def test_sparse_pattern_round_trip():
    m = np.random.default_rng(2).random((7, 7)) < 0.5
    assert np.array_equal(SparsePattern.from_dense(m).to_dense(), m)


def test_no_hidden_state():
    rng = np.random.default_rng(0)
    a, b = param(rng, 5, 4), param(rng, 4, 4)
    r1 = ad.dropout(ad.relu(ad.matmul(a, b)), 0.2, True, seed=3).data
    r2 = ad.dropout(ad.relu(ad.matmul(a, b)), 0.2, True, seed=3).data
    assert np.array_equal(r1, r2)
