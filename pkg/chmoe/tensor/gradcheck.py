"""
Central finite-difference gradient checking.
"""

import logging

import numpy as np

from .tensor import backward, zero_grads

__all__ = ('numeric_gradient', 'relative_error', 'check_gradients', 'GradCheckReport')

l = logging.getLogger(name=__name__)


def relative_error(analytic, numeric, floor=1e-12):
    """
    ``||a - n|| / max(||a||, ||n||)``, or 0 when both vanish.
    """
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    numeric = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if denom < floor:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)


def numeric_gradient(loss_fn, tensor, indices, h=1e-5):
    """
    Differentiate ``loss_fn()`` with respect to the flat entries `indices` of `tensor` by central differences.
    The tensor's data is perturbed in place and restored.
    """
    flat = tensor.data.reshape(-1)
    out = np.empty(len(indices))
    for n, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + h
        plus = loss_fn().item()
        flat[i] = orig - h
        minus = loss_fn().item()
        flat[i] = orig
        out[n] = (plus - minus) / (2 * h)
    return out


class GradCheckReport:
    """
    Result of :func:`check_gradients`.

    :ivar dict errors:  Relative error per parameter name.
    :ivar float tol:    The tolerance checked against.
    """

    def __init__(self, errors, tol):
        self.errors = errors
        self.tol = tol

    @property
    def passed(self):
        return all(e < self.tol for e in self.errors.values())

    @property
    def worst(self):
        if not self.errors:
            return None, 0.0
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    def failures(self):
        return {k: v for k, v in self.errors.items() if v >= self.tol}

    def __repr__(self):
        name, err = self.worst
        return "<GradCheckReport %d groups, worst %s=%.3g, %s>" % (len(self.errors), name, err,
                                                                    'pass' if self.passed else 'FAIL')


def check_gradients(loss_fn, params, h=1e-5, tol=1e-4, max_entries=None, rng=None):
    """
    Compare the gradients backward() produces for every tensor in `params` against central differences.

    :param loss_fn:         Callable rebuilding the graph and returning a scalar :class:`Tensor`.
    :param params:          Mapping from name to leaf tensor.
    :param float h:         Step size.
    :param float tol:       Relative error bound per parameter group.
    :param max_entries:     If set, check at most this many entries per tensor, drawn with `rng`.
    :rtype:                 GradCheckReport
    """
    zero_grads(params.values())
    backward(loss_fn())
    errors = {}
    for name, p in params.items():
        analytic = np.zeros(p.shape) if p.grad is None else p.grad
        analytic = analytic.reshape(-1)
        if max_entries is not None and p.size > max_entries:
            rng = rng if rng is not None else np.random.default_rng(0)
            indices = np.sort(rng.choice(p.size, size=max_entries, replace=False))
        else:
            indices = np.arange(p.size)
        numeric = numeric_gradient(loss_fn, p, indices, h=h)
        errors[name] = relative_error(analytic[indices], numeric)
        if errors[name] >= tol:
            l.error("gradient mismatch on %s: relative error %.3g", name, errors[name])
    zero_grads(params.values())
    return GradCheckReport(errors, tol)
