"""
Multiply-accumulate instrumentation.

While a :class:`MacCounter` is active, ``matmul`` and ``attention`` report the MACs they execute to it, attributed to
the innermost :func:`scope` entered on the same thread::

    with MacCounter() as counter:
        with scope('q_proj'):
            q = matmul(x, w_q)
    counter.counts['q_proj']
"""

import threading
import contextlib
import collections

__all__ = ('MacCounter', 'scope', 'count_macs', 'UNSCOPED')

UNSCOPED = 'unscoped'

_state = threading.local()


def _stack(name):
    stack = getattr(_state, name, None)
    if stack is None:
        stack = []
        setattr(_state, name, stack)
    return stack


class MacCounter:
    """
    Accumulates MAC counts per scope name.

    :ivar counts:   Mapping from scope name to the number of multiply-accumulates executed under it.
    :vartype counts: collections.Counter
    """

    def __init__(self):
        self.counts = collections.Counter()

    def __enter__(self):
        _stack('counters').append(self)
        return self

    def __exit__(self, *exc):
        _stack('counters').remove(self)
        return False

    @property
    def total(self):
        return sum(self.counts.values())

    def __repr__(self):
        return "<MacCounter %s>" % dict(self.counts)


@contextlib.contextmanager
def scope(name):
    scopes = _stack('scopes')
    scopes.append(name)
    try:
        yield
    finally:
        scopes.pop()


def count_macs(n):
    counters = getattr(_state, 'counters', None)
    if not counters:
        return
    scopes = _stack('scopes')
    name = scopes[-1] if scopes else UNSCOPED
    for counter in counters:
        counter.counts[name] += int(n)
