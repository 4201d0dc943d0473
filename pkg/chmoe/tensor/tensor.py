import itertools
import logging

import numpy as np

from ..errors import ChMoEContractError

__all__ = ('Tensor', 'Function', 'Graph', 'backward', 'zero_grads', 'as_tensor', 'register_op', 'ALL_OPS')

l = logging.getLogger(name=__name__)

_tensor_ids = itertools.count()
_op_ids = itertools.count()


class Tensor:
    """
    A dense, row-major array of 64-bit floats with an optional gradient slot.

    Tensors produced by operations are never modified afterwards. The only mutable parts are the ``grad`` buffer and,
    for leaf parameters, the data the optimizer updates between graphs.

    :ivar int id:               Process-unique identifier, used by the graph to key intermediate gradients.
    :ivar data:                 The values.
    :vartype data:              numpy.ndarray
    :ivar grad:                 The accumulated gradient, same shape as `data`, or None.
    :vartype grad:              numpy.ndarray or None
    :ivar bool requires_grad:   Whether backward should produce a gradient for this tensor.
    """

    __slots__ = ('id', 'data', 'grad', 'requires_grad', '_op')

    def __init__(self, data, requires_grad=False):
        self.id = next(_tensor_ids)
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._op = None

    @classmethod
    def _wrap(cls, arr, requires_grad, op):
        """
        Build an op output without copying `arr`.
        """
        t = cls.__new__(cls)
        t.id = next(_tensor_ids)
        t.data = arr if arr.dtype == np.float64 else arr.astype(np.float64)
        t.grad = None
        t.requires_grad = requires_grad
        t._op = op
        return t

    @classmethod
    def zeros(cls, shape, requires_grad=False):
        return cls(np.zeros(shape), requires_grad=requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._op is None

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self):
        """
        A copy of the values, safe to modify.
        """
        return self.data.copy()

    def detach(self):
        return Tensor._wrap(self.data, False, None)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return "<Tensor %s%s>" % ('x'.join(str(x) for x in self.shape) or 'scalar',
                                  ", requires_grad" if self.requires_grad else "")

    def __len__(self):
        return self.data.shape[0]

    # operator sugar

    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        if isinstance(other, (int, float)):
            return ops.scale(self, other)
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        if isinstance(other, (int, float)):
            return ops.scale(self, 1.0 / other)
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    @property
    def T(self):
        from . import ops
        return ops.transpose(self)


def as_tensor(x):
    """
    Wrap plain numbers and arrays as constant tensors; tensors pass through.
    """
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


class Function:
    """
    Base class for differentiable operations. One instance is one recorded op of a graph: it holds its inputs and
    whatever activations its backward rule needs.

    Subclasses implement :meth:`forward` on numpy arrays and :meth:`backward`, which receives the gradient of the
    output and returns one gradient (or None) per input, in input order.

    :ivar int op_id:        Position of this op in creation order.
    :ivar tuple inputs:     The input tensors.
    :ivar int output_id:    Id of the tensor this op produced.
    """
    name = None

    def __init__(self, *inputs):
        self.op_id = next(_op_ids)
        self.inputs = inputs
        self.output_id = None

    def forward(self, *arrays, **kwargs):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    @classmethod
    def run(cls, *inputs, **kwargs):
        """
        Evaluate the op and record it if any input requires a gradient.

        :returns: A tuple ``(function, output)``.
        """
        fn = cls(*inputs)
        out_data = fn.forward(*[t.data for t in inputs], **kwargs)
        requires_grad = any(t.requires_grad for t in inputs)
        out = Tensor._wrap(out_data, requires_grad, fn if requires_grad else None)
        fn.output_id = out.id
        return fn, out

    @classmethod
    def apply(cls, *inputs, **kwargs):
        return cls.run(*inputs, **kwargs)[1]

    def __repr__(self):
        return "<Op %s #%d>" % (self.name or type(self).__name__, self.op_id)


ALL_OPS = dict()


def register_op(name, cls):
    cls.name = name
    ALL_OPS.update({name: cls})


class Graph:
    """
    The ops that contributed to one output, in topological order: every op appears after the ops that produced its
    inputs. Ops whose inputs need no gradient are not recorded at all.

    :ivar list records: The :class:`Function` instances, inputs first.
    """

    def __init__(self, records):
        self.records = records

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @classmethod
    def from_output(cls, output):
        order = []
        visited = set()
        stack = [(output._op, False)]
        while stack:
            fn, expanded = stack.pop()
            if fn is None:
                continue
            if expanded:
                order.append(fn)
                continue
            if fn.op_id in visited:
                continue
            visited.add(fn.op_id)
            stack.append((fn, True))
            for t in fn.inputs:
                if t._op is not None and t._op.op_id not in visited:
                    stack.append((t._op, False))
        return cls(order)

    def backward(self, output, seed):
        """
        Propagate `seed` (the gradient of `output`) to every leaf that requires a gradient, visiting each op once in
        reverse order. Leaf gradients accumulate.
        """
        grads = {output.id: seed}
        for fn in reversed(self.records):
            g = grads.pop(fn.output_id, None)
            if g is None:
                continue
            in_grads = fn.backward(g)
            for t, gi in zip(fn.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t._op is None:
                    t.grad = gi.copy() if t.grad is None else t.grad + gi
                elif t.id in grads:
                    grads[t.id] = grads[t.id] + gi
                else:
                    grads[t.id] = gi


def backward(loss):
    """
    Populate ``grad`` on every leaf tensor with ``requires_grad`` that `loss` depends on. Calling this twice without
    :func:`zero_grads` accumulates.

    :param Tensor loss: A scalar tensor.
    """
    if loss.data.size != 1:
        raise ChMoEContractError("backward() needs a scalar loss, got shape %s" % (loss.shape,))
    seed = np.ones_like(loss.data)
    if loss._op is None:
        if loss.requires_grad:
            loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    graph = Graph.from_output(loss)
    l.debug("backward through %d ops", len(graph))
    graph.backward(loss, seed)


def zero_grads(tensors):
    for t in tensors:
        t.grad = None
