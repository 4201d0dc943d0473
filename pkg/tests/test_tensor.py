import math
import logging

import numpy as np
import pytest

import chmoe
from chmoe.tensor import (Tensor, Graph, backward, zero_grads, matmul, add, sub, mul, div, scale, mean, relu,
                          softmax_rows, layer_norm, index_select, index_add, take, scale_rows, concat_rows,
                          slice_rows, cross_entropy, attention, transpose, check_gradients, MacCounter, scope,
                          ALL_OPS)
from chmoe.tensor import sum as tsum
from chmoe.rng import make_rng


def _leaf(rng, *shape):
    return Tensor(rng.normal(0.0, 1.0, shape), requires_grad=True)


def test_matmul_values():
    eye = Tensor(np.eye(2))
    m = Tensor([[1, 2], [3, 4]])
    assert (matmul(eye, m).data == m.data).all()
    assert matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    try:
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
    except chmoe.ChMoEDimensionError as e:
        assert '(2, 3)' in str(e)
        assert '(4, 5)' in str(e)
    else:
        assert False


def test_matmul_gradcheck():
    rng = make_rng(1, 'check')
    a, b = _leaf(rng, 5, 7), _leaf(rng, 7, 3)
    w = Tensor(rng.normal(0.0, 1.0, (5, 3)))
    res = check_gradients(lambda: tsum(mul(matmul(a, b), w)), {'a': a, 'b': b}, tol=1e-7)
    assert res.passed, res.errors


def test_softmax_rows():
    assert np.allclose(softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3, 1 / 3, 1 / 3]], rtol=0, atol=1e-15)
    out = softmax_rows(Tensor([[1000.0, 0.0]])).data
    assert np.isfinite(out).all()
    assert out[0, 0] == 1.0
    assert out[0, 1] < 1e-300
    logs = softmax_rows(Tensor([[math.log(1), math.log(2), math.log(3)]])).data
    assert np.allclose(logs, [[1 / 6, 2 / 6, 3 / 6]], rtol=0, atol=1e-12)


def test_softmax_rows_are_stochastic():
    rng = make_rng(2, 'check')
    out = softmax_rows(Tensor(rng.normal(0.0, 30.0, (50, 9)))).data
    assert (out >= 0).all()
    assert np.abs(out.sum(axis=1) - 1.0).max() < 1e-12


def test_elementwise_examples():
    assert add(Tensor([1, 2]), Tensor([3, 4])).data.tolist() == [4.0, 6.0]
    assert mean(Tensor([2.5] * 7)).item() == 2.5
    # leading-dimension broadcast of a row
    out = add(Tensor(np.zeros((3, 2))), Tensor([1.0, 2.0]))
    assert out.data.tolist() == [[1.0, 2.0]] * 3
    assert relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]
    assert scale(Tensor([1.0, -2.0]), 3).data.tolist() == [3.0, -6.0]


def test_broadcast_only_leading():
    try:
        add(Tensor(np.zeros((3, 2))), Tensor(np.zeros(3)))
    except chmoe.ChMoEDimensionError:
        pass
    else:
        assert False


def test_layer_norm_statistics():
    rng = make_rng(3, 'check')
    out = layer_norm(Tensor(rng.normal(4.0, 3.0, (6, 10)))).data
    assert np.abs(out.mean(axis=1)).max() < 1e-10
    assert np.abs(out.var(axis=1) - 1.0).max() < 1e-10


def test_index_select_and_add():
    a = Tensor([[1.0], [2.0], [3.0]])
    assert index_select(a, [2, 0]).data.tolist() == [[3.0], [1.0]]
    dest = index_add(Tensor(np.zeros((2, 1))), [0, 0], Tensor([[1.0], [2.0]]))
    assert dest.data.tolist() == [[3.0], [0.0]]

    rng = make_rng(4, 'check')
    x = Tensor(rng.normal(0.0, 1.0, (5, 3)))
    perm = rng.permutation(5)
    back = index_add(Tensor(np.zeros((5, 3))), perm, index_select(x, perm))
    assert (back.data == x.data).all()


def test_index_error_names_value():
    with pytest.raises(chmoe.ChMoEIndexError) as e:
        index_select(Tensor(np.zeros((3, 2))), [0, 7])
    assert '7' in str(e.value)
    with pytest.raises(chmoe.ChMoEIndexError):
        cross_entropy(Tensor(np.zeros((1, 3))), [3])


def test_cross_entropy():
    assert abs(cross_entropy(Tensor(np.zeros((2, 4))), [0, 3]).item() - math.log(4)) < 1e-15
    assert cross_entropy(Tensor([[100.0, 0.0, 0.0]]), [0]).item() < 1e-40

    rng = make_rng(5, 'check')
    logits = rng.normal(0.0, 2.0, (3, 5))
    labels = [4, 0, 2]
    brute = np.mean([np.log(np.sum(np.exp(row))) - row[y] for row, y in zip(logits, labels)])
    assert abs(cross_entropy(Tensor(logits), labels).item() - brute) < 1e-10


def test_cross_entropy_gradient():
    logits = Tensor([[1.0, 2.0, 0.5], [0.0, 0.0, 0.0]], requires_grad=True)
    backward(cross_entropy(logits, [1, 2]))
    p = np.exp(logits.data) / np.exp(logits.data).sum(axis=1, keepdims=True)
    p[[0, 1], [1, 2]] -= 1.0
    assert np.allclose(logits.grad, p / 2, rtol=0, atol=1e-12)


def test_backward_examples():
    w = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    backward(tsum(w))
    assert w.grad.tolist() == [1.0, 1.0, 1.0]

    w = Tensor([1.0, 2.0], requires_grad=True)
    backward(tsum(mul(w, w)))
    assert w.grad.tolist() == [2.0, 4.0]
    # accumulates until reset
    backward(tsum(mul(w, w)))
    assert w.grad.tolist() == [4.0, 8.0]
    zero_grads([w])
    assert w.grad is None


def test_backward_needs_scalar():
    w = Tensor([1.0, 2.0], requires_grad=True)
    try:
        backward(mul(w, w))
    except chmoe.ChMoEContractError:
        pass
    else:
        assert False


def test_graph_is_topological():
    rng = make_rng(6, 'check')
    a = _leaf(rng, 3, 3)
    h = relu(matmul(a, a))
    loss = tsum(add(h, matmul(h, a)))
    graph = Graph.from_output(loss)
    produced = set()
    for fn in graph:
        for t in fn.inputs:
            if t._op is not None:
                assert t._op.output_id in produced
        produced.add(fn.output_id)
    assert len({fn.op_id for fn in graph}) == len(graph)


def test_shared_subexpression_gradient():
    # h feeds two consumers; its gradient must be the sum of both paths
    x = Tensor([1.5, -2.0], requires_grad=True)
    h = mul(x, x)
    backward(tsum(add(h, scale(h, 3.0))))
    assert x.grad.tolist() == [4 * 2 * 1.5, 4 * 2 * -2.0]


def test_constants_are_not_recorded():
    a = Tensor(np.ones((2, 2)))
    out = matmul(a, a)
    assert out.is_leaf
    assert not out.requires_grad


def test_op_gradchecks():
    rng = make_rng(7, 'check')
    a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    pos = Tensor(rng.uniform(0.5, 1.5, (3, 4)), requires_grad=True)
    gamma, beta, v = _leaf(rng, 4), _leaf(rng, 4), _leaf(rng, 4)
    rw = _leaf(rng, 3)
    wts = Tensor(rng.normal(0.0, 1.0, (3, 4)))
    idx = [2, 0, 2]

    def weighted(x):
        return tsum(mul(x, wts))

    cases = [
        (lambda: weighted(div(a, pos)), {'a': a, 'pos': pos}),
        (lambda: weighted(sub(a, v)), {'a': a, 'v': v}),
        (lambda: weighted(layer_norm(a, gamma, beta)), {'a': a, 'gamma': gamma, 'beta': beta}),
        (lambda: weighted(softmax_rows(a)), {'a': a}),
        (lambda: weighted(index_add(a, idx, b)), {'a': a, 'b': b}),
        (lambda: weighted(scale_rows(a, rw)), {'a': a, 'rw': rw}),
        (lambda: tsum(mul(take(a, idx, [3, 1, 0]), rw)), {'a': a, 'rw': rw}),
        (lambda: tsum(mul(index_select(a, [1, 3], axis=1), wts.data[:, :2])), {'a': a}),
        (lambda: weighted(slice_rows(concat_rows([a, b]), 1, 4)), {'a': a, 'b': b}),
        (lambda: weighted(transpose(transpose(a))), {'a': a}),
        (lambda: tsum(mul(mean(a, axis=0), v)), {'a': a, 'v': v}),
    ]
    for fn, params in cases:
        res = check_gradients(fn, params, tol=1e-6)
        assert res.passed, res.errors


def test_attention_single_key():
    v = Tensor([[1.0, -2.0, 3.0, 0.5]])
    out, w = attention(Tensor(np.ones((1, 4))), Tensor(np.zeros((1, 4))), v, heads=2, return_weights=True)
    assert w.tolist() == [[[1.0]], [[1.0]]]
    assert (out.data == v.data).all()


def test_attention_symmetric_targets():
    rng = make_rng(8, 'check')
    row = rng.normal(0.0, 1.0, (1, 4))
    kv = Tensor(np.concatenate([row, row]))
    _, w = attention(Tensor(rng.normal(0.0, 1.0, (3, 4))), kv, kv, return_weights=True)
    assert np.allclose(w, 0.5, rtol=0, atol=1e-15)


def test_attention_gradcheck_and_rows():
    rng = make_rng(9, 'check')
    q, k, v = _leaf(rng, 3, 8), _leaf(rng, 5, 8), _leaf(rng, 5, 8)
    wts = Tensor(rng.normal(0.0, 1.0, (3, 8)))
    res = check_gradients(lambda: tsum(mul(attention(q, k, v, heads=4), wts)), {'q': q, 'k': k, 'v': v}, tol=1e-6)
    assert res.passed, res.errors
    _, w = attention(q, k, v, heads=4, return_weights=True)
    assert w.shape == (4, 3, 5)
    assert np.abs(w.sum(axis=-1) - 1.0).max() < 1e-12


def test_attention_needs_keys():
    with pytest.raises(chmoe.ChMoEContractError):
        attention(Tensor(np.zeros((2, 4))), Tensor(np.zeros((0, 4))), Tensor(np.zeros((0, 4))))
    with pytest.raises(chmoe.ChMoEDimensionError):
        attention(Tensor(np.zeros((2, 6))), Tensor(np.zeros((1, 6))), Tensor(np.zeros((1, 6))), heads=4)


def test_mac_counter():
    a = Tensor(np.zeros((3, 4)))
    b = Tensor(np.zeros((4, 5)))
    with MacCounter() as outer:
        matmul(a, b)
        with MacCounter() as inner:
            with scope('proj'):
                matmul(a, b)
            with scope('attention'):
                attention(Tensor(np.zeros((2, 4))), Tensor(np.zeros((6, 4))), Tensor(np.zeros((6, 4))), heads=2)
    assert inner.counts['proj'] == 60
    assert inner.counts['attention'] == 2 * 2 * 6 * 4
    assert outer.counts['unscoped'] == 60
    assert outer.total == 60 + 60 + 96
    # nothing is counted outside a counter
    matmul(a, b)
    assert outer.total == 216


def test_replay_is_deterministic():
    def run():
        rng = make_rng(10, 'check')
        a = _leaf(rng, 4, 4)
        loss = tsum(softmax_rows(matmul(a, a)))
        backward(loss)
        return loss.item(), a.grad.copy()
    l1, g1 = run()
    l2, g2 = run()
    assert l1 == l2
    assert (g1 == g2).all()


def test_registry():
    for name in ('matmul', 'softmax_rows', 'index_add', 'attention', 'layer_norm', 'cross_entropy'):
        assert ALL_OPS[name].name == name


if __name__ == '__main__':
    logging.basicConfig(level=logging.DEBUG)
    for _name, _fn in sorted(globals().items()):
        if _name.startswith('test_') and callable(_fn):
            _fn()
