"""
The fixed operation set. Each op is a :class:`Function` subclass registered by name, plus a lowercase wrapper that
validates its operands and applies it.

Broadcasting is limited to leading dimensions: an operand whose shape is a suffix of the other's (a scalar, or a
``[D]`` row against ``[n x D]``) is repeated along the missing leading axes.
"""

import math
import logging

import numpy as np

from .tensor import Tensor, Function, register_op, as_tensor
from .instrument import count_macs
from ..errors import ChMoEDimensionError, ChMoEIndexError, ChMoEContractError

__all__ = (
    'add', 'sub', 'mul', 'div', 'scale', 'matmul', 'transpose', 'sum', 'mean', 'relu', 'softmax_rows', 'layer_norm',
    'index_select', 'index_add', 'take', 'scale_rows', 'concat_rows', 'slice_rows', 'cross_entropy', 'attention',
    'softmax_array',
)

l = logging.getLogger(name=__name__)


def softmax_array(x, axis=-1):
    """
    Numerically stable softmax of a numpy array along `axis`. Ties stay exact ties.
    """
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def _check_broadcast(a_shape, b_shape, opname):
    small, big = (a_shape, b_shape) if len(a_shape) <= len(b_shape) else (b_shape, a_shape)
    if tuple(big[len(big) - len(small):]) != tuple(small):
        raise ChMoEDimensionError("%s: cannot broadcast shapes %s and %s (only leading dimensions broadcast)"
                                  % (opname, a_shape, b_shape))


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    return grad


def _check_indices(idx, bound, opname):
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    if idx.size:
        bad = idx[(idx < 0) | (idx >= bound)]
        if bad.size:
            raise ChMoEIndexError("%s: index %d out of range [0, %d)" % (opname, int(bad[0]), bound))
    return idx


#
# elementwise
#

class Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, grad):
        a, b = self.inputs
        return _unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)


class Sub(Function):
    def forward(self, a, b):
        return a - b

    def backward(self, grad):
        a, b = self.inputs
        return _unbroadcast(grad, a.shape), -_unbroadcast(grad, b.shape)


class Mul(Function):
    def forward(self, a, b):
        return a * b

    def backward(self, grad):
        a, b = self.inputs
        return _unbroadcast(grad * b.data, a.shape), _unbroadcast(grad * a.data, b.shape)


class Div(Function):
    def forward(self, a, b):
        return a / b

    def backward(self, grad):
        a, b = self.inputs
        return (_unbroadcast(grad / b.data, a.shape),
                _unbroadcast(-grad * a.data / (b.data * b.data), b.shape))


class Scale(Function):
    def forward(self, a, factor=1.0):
        self.factor = factor
        return a * factor

    def backward(self, grad):
        return (grad * self.factor,)


class ReLU(Function):
    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0.0)

    def backward(self, grad):
        return (grad * self.mask,)


def _binary(cls, a, b, opname):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, opname)
    return cls.apply(a, b)


def add(a, b):
    return _binary(Add, a, b, 'add')


def sub(a, b):
    return _binary(Sub, a, b, 'sub')


def mul(a, b):
    return _binary(Mul, a, b, 'mul')


def div(a, b):
    return _binary(Div, a, b, 'div')


def scale(a, factor):
    return Scale.apply(as_tensor(a), factor=float(factor))


def relu(a):
    return ReLU.apply(as_tensor(a))


#
# linear algebra
#

class MatMul(Function):
    def forward(self, a, b):
        count_macs(a.shape[0] * a.shape[1] * b.shape[1])
        return a @ b

    def backward(self, grad):
        a, b = self.inputs
        return grad @ b.data.T, a.data.T @ grad


class Transpose(Function):
    def forward(self, a):
        return a.T.copy()

    def backward(self, grad):
        return (grad.T,)


def matmul(a, b):
    """
    ``c[i, j] = sum_t a[i, t] * b[t, j]``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ChMoEDimensionError("matmul: shapes %s and %s are not aligned" % (a.shape, b.shape))
    return MatMul.apply(a, b)


def transpose(a):
    a = as_tensor(a)
    if a.ndim != 2:
        raise ChMoEDimensionError("transpose: expected a matrix, got shape %s" % (a.shape,))
    return Transpose.apply(a)


#
# reductions
#

class Sum(Function):
    def forward(self, a, axis=None):
        self.axis = axis
        return np.asarray(a.sum(axis=axis))

    def backward(self, grad):
        a, = self.inputs
        if self.axis is None:
            return (np.broadcast_to(grad, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(grad, self.axis), a.shape).copy(),)


class Mean(Function):
    def forward(self, a, axis=None):
        self.axis = axis
        self.count = a.size if axis is None else a.shape[axis]
        return np.asarray(a.mean(axis=axis))

    def backward(self, grad):
        a, = self.inputs
        if self.axis is None:
            return (np.broadcast_to(grad / self.count, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(grad / self.count, self.axis), a.shape).copy(),)


def sum(a, axis=None):  # pylint:disable=redefined-builtin
    a = as_tensor(a)
    if axis is not None and not 0 <= axis < a.ndim:
        raise ChMoEDimensionError("sum: axis %d out of range for shape %s" % (axis, a.shape))
    return Sum.apply(a, axis=axis)


def mean(a, axis=None):
    a = as_tensor(a)
    if axis is not None and not 0 <= axis < a.ndim:
        raise ChMoEDimensionError("mean: axis %d out of range for shape %s" % (axis, a.shape))
    return Mean.apply(a, axis=axis)


#
# normalization
#

class SoftmaxRows(Function):
    def forward(self, a):
        self.out = softmax_array(a, axis=-1)
        return self.out

    def backward(self, grad):
        p = self.out
        return (p * (grad - np.sum(grad * p, axis=-1, keepdims=True)),)


class LayerNorm(Function):
    def forward(self, a, *affine, eps=1e-12):
        mu = a.mean(axis=-1, keepdims=True)
        var = a.var(axis=-1, keepdims=True)
        self.rstd = 1.0 / np.sqrt(var + eps)
        self.xhat = (a - mu) * self.rstd
        if affine:
            gamma, beta = affine
            return self.xhat * gamma + beta
        return self.xhat

    def backward(self, grad):
        affine = len(self.inputs) == 3
        dxhat = grad * self.inputs[1].data if affine else grad
        xhat = self.xhat
        dx = self.rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                          - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        if not affine:
            return (dx,)
        return dx, (grad * xhat).sum(axis=0), grad.sum(axis=0)


def softmax_rows(a):
    """
    Softmax of every row, computed with per-row max subtraction.
    """
    a = as_tensor(a)
    if a.ndim not in (1, 2):
        raise ChMoEDimensionError("softmax_rows: expected a vector or a matrix, got shape %s" % (a.shape,))
    return SoftmaxRows.apply(a)


def layer_norm(a, gamma=None, beta=None, eps=1e-12):
    """
    Normalize every row to zero mean and unit variance, then optionally apply ``gamma * x + beta``.
    """
    a = as_tensor(a)
    if a.ndim != 2:
        raise ChMoEDimensionError("layer_norm: expected a matrix, got shape %s" % (a.shape,))
    if (gamma is None) != (beta is None):
        raise ChMoEContractError("layer_norm: gamma and beta go together")
    if gamma is None:
        return LayerNorm.apply(a, eps=eps)
    if gamma.shape != (a.shape[1],) or beta.shape != (a.shape[1],):
        raise ChMoEDimensionError("layer_norm: affine shapes %s/%s do not match rows of width %d"
                                  % (gamma.shape, beta.shape, a.shape[1]))
    return LayerNorm.apply(a, gamma, beta, eps=eps)


#
# gather / scatter
#

class IndexSelect(Function):
    def forward(self, a, idx=None, axis=0):
        self.idx = idx
        self.axis = axis
        return np.take(a, idx, axis=axis)

    def backward(self, grad):
        a, = self.inputs
        out = np.zeros(a.shape)
        if self.axis == 0:
            np.add.at(out, self.idx, grad)
        else:
            np.add.at(out.T, self.idx, grad.T)
        return (out,)


class IndexAdd(Function):
    def forward(self, dest, src, idx=None):
        self.idx = idx
        out = dest.copy()
        np.add.at(out, idx, src)
        return out

    def backward(self, grad):
        return grad, grad[self.idx]


class Take(Function):
    def forward(self, a, rows=None, cols=None):
        self.rows, self.cols = rows, cols
        return a[rows, cols]

    def backward(self, grad):
        a, = self.inputs
        out = np.zeros(a.shape)
        np.add.at(out, (self.rows, self.cols), grad)
        return (out,)


class ScaleRows(Function):
    def forward(self, a, w):
        return a * w[:, None]

    def backward(self, grad):
        a, w = self.inputs
        return grad * w.data[:, None], (grad * a.data).sum(axis=1)


class ConcatRows(Function):
    def forward(self, *arrays):
        self.sizes = [x.shape[0] for x in arrays]
        return np.concatenate(arrays, axis=0)

    def backward(self, grad):
        bounds = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, bounds, axis=0))


class SliceRows(Function):
    def forward(self, a, start=0, stop=None):
        self.start, self.stop = start, stop
        return a[start:stop].copy()

    def backward(self, grad):
        a, = self.inputs
        out = np.zeros(a.shape)
        out[self.start:self.stop] = grad
        return (out,)


def index_select(a, idx, axis=0):
    """
    Gather rows (``axis=0``) or columns (``axis=1``) of `a`. The backward rule is a scatter-add.
    """
    a = as_tensor(a)
    if a.ndim != 2 and not (a.ndim == 1 and axis == 0):
        raise ChMoEDimensionError("index_select: expected a matrix, got shape %s" % (a.shape,))
    idx = _check_indices(idx, a.shape[axis], 'index_select')
    return IndexSelect.apply(a, idx=idx, axis=axis)


def index_add(dest, idx, src):
    """
    Return a copy of `dest` with row ``src[t]`` added onto row ``idx[t]`` for every t. Duplicate indices accumulate.
    """
    dest, src = as_tensor(dest), as_tensor(src)
    idx = _check_indices(idx, dest.shape[0], 'index_add')
    if src.shape[0] != idx.size or src.shape[1:] != dest.shape[1:]:
        raise ChMoEDimensionError("index_add: cannot add source %s at %d indices into %s"
                                  % (src.shape, idx.size, dest.shape))
    return IndexAdd.apply(dest, src, idx=idx)


def take(a, rows, cols):
    """
    Element gather: ``out[t] = a[rows[t], cols[t]]``.
    """
    a = as_tensor(a)
    if a.ndim != 2:
        raise ChMoEDimensionError("take: expected a matrix, got shape %s" % (a.shape,))
    rows = _check_indices(rows, a.shape[0], 'take')
    cols = _check_indices(cols, a.shape[1], 'take')
    if rows.size != cols.size:
        raise ChMoEDimensionError("take: %d row indices but %d column indices" % (rows.size, cols.size))
    return Take.apply(a, rows=rows, cols=cols)


def scale_rows(a, w):
    """
    Multiply row t of `a` by ``w[t]``.
    """
    a, w = as_tensor(a), as_tensor(w)
    if a.ndim != 2 or w.shape != (a.shape[0],):
        raise ChMoEDimensionError("scale_rows: cannot weight rows of %s with %s" % (a.shape, w.shape))
    return ScaleRows.apply(a, w)


def concat_rows(tensors):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ChMoEContractError("concat_rows: nothing to concatenate")
    tail = tensors[0].shape[1:]
    for t in tensors:
        if t.shape[1:] != tail:
            raise ChMoEDimensionError("concat_rows: shapes %s and %s differ past the first axis"
                                      % (tensors[0].shape, t.shape))
    return ConcatRows.apply(*tensors)


def slice_rows(a, start, stop):
    a = as_tensor(a)
    if not 0 <= start <= stop <= a.shape[0]:
        raise ChMoEIndexError("slice_rows: [%d, %d) out of range for %d rows" % (start, stop, a.shape[0]))
    return SliceRows.apply(a, start=start, stop=stop)


#
# objectives
#

class CrossEntropy(Function):
    def forward(self, logits, labels=None):
        self.labels = labels
        shifted = logits - logits.max(axis=1, keepdims=True)
        logsumexp = np.log(np.exp(shifted).sum(axis=1))
        self.probs = np.exp(shifted - logsumexp[:, None])
        rows = np.arange(logits.shape[0])
        return np.asarray(np.mean(logsumexp - shifted[rows, labels]))

    def backward(self, grad):
        b = self.probs.shape[0]
        d = self.probs.copy()
        d[np.arange(b), self.labels] -= 1.0
        return (d * (grad / b),)


def cross_entropy(logits, labels):
    """
    Mean negative log-likelihood of the true classes under a row softmax of `logits`.
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ChMoEDimensionError("cross_entropy: expected [batch x classes] logits, got %s" % (logits.shape,))
    labels = _check_indices(labels, logits.shape[1], 'cross_entropy')
    if labels.size != logits.shape[0]:
        raise ChMoEDimensionError("cross_entropy: %d labels for %d rows" % (labels.size, logits.shape[0]))
    return CrossEntropy.apply(logits, labels=labels)


#
# attention
#

class Attention(Function):
    """
    Multi-head scaled dot-product attention of `q` rows over `k`/`v` rows. The width is split into `heads` equal
    slices after projection; each head scales by the square root of its own width.
    """

    def forward(self, q, k, v, heads=1):
        n, width = q.shape
        m = k.shape[0]
        dh = width // heads
        self.heads = heads
        self.scale = 1.0 / math.sqrt(dh)
        count_macs(2 * n * m * width)
        self.qh = q.reshape(n, heads, dh).transpose(1, 0, 2)
        self.kh = k.reshape(m, heads, dh).transpose(1, 0, 2)
        self.vh = v.reshape(m, heads, dh).transpose(1, 0, 2)
        scores = np.matmul(self.qh, self.kh.transpose(0, 2, 1)) * self.scale
        self.weights = softmax_array(scores, axis=-1)
        out = np.matmul(self.weights, self.vh)
        return out.transpose(1, 0, 2).reshape(n, width)

    def backward(self, grad):
        n, width = grad.shape
        m = self.kh.shape[1]
        dh = width // self.heads
        p = self.weights
        gh = grad.reshape(n, self.heads, dh).transpose(1, 0, 2)
        dp = np.matmul(gh, self.vh.transpose(0, 2, 1))
        dv = np.matmul(p.transpose(0, 2, 1), gh)
        ds = p * (dp - np.sum(dp * p, axis=-1, keepdims=True)) * self.scale
        dq = np.matmul(ds, self.kh)
        dk = np.matmul(ds.transpose(0, 2, 1), self.qh)
        return (dq.transpose(1, 0, 2).reshape(n, width),
                dk.transpose(1, 0, 2).reshape(m, width),
                dv.transpose(1, 0, 2).reshape(m, width))


def attention(q, k, v, heads=1, return_weights=False):
    """
    :param q:               Queries, ``[n x D]``.
    :param k:               Keys, ``[m x D]``.
    :param v:               Values, ``[m x D]``.
    :param int heads:       Number of heads; must divide D.
    :param return_weights:  Also return the ``[heads x n x m]`` attention weights as a numpy array.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2 or not q.shape[1] == k.shape[1] == v.shape[1] \
            or k.shape[0] != v.shape[0]:
        raise ChMoEDimensionError("attention: incompatible shapes q=%s k=%s v=%s" % (q.shape, k.shape, v.shape))
    if heads < 1 or q.shape[1] % heads:
        raise ChMoEDimensionError("attention: %d heads do not divide width %d" % (heads, q.shape[1]))
    if k.shape[0] == 0 and q.shape[0] > 0:
        raise ChMoEContractError("attention: %d queries cannot attend to zero keys" % q.shape[0])
    fn, out = Attention.run(q, k, v, heads=heads)
    if return_weights:
        return out, fn.weights.copy()
    return out


register_op('add', Add)
register_op('sub', Sub)
register_op('mul', Mul)
register_op('div', Div)
register_op('scale', Scale)
register_op('relu', ReLU)
register_op('matmul', MatMul)
register_op('transpose', Transpose)
register_op('sum', Sum)
register_op('mean', Mean)
register_op('softmax_rows', SoftmaxRows)
register_op('layer_norm', LayerNorm)
register_op('index_select', IndexSelect)
register_op('index_add', IndexAdd)
register_op('take', Take)
register_op('scale_rows', ScaleRows)
register_op('concat_rows', ConcatRows)
register_op('slice_rows', SliceRows)
register_op('cross_entropy', CrossEntropy)
register_op('attention', Attention)
