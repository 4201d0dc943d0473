import os
import logging

import numpy as np
import sortedcontainers

from .tensor import Tensor, save_tensor, load_tensor
from .errors import ChMoEContractError, ChMoEFormatError, ChMoEConfigError
from .utils import format_shape, parse_shape

__all__ = ('ParameterStore', 'write_manifest', 'read_manifest', 'MANIFEST_NAME')

l = logging.getLogger(name=__name__)

MANIFEST_NAME = 'manifest.txt'


class ParameterStore:
    """
    The trainable leaf tensors of a model, keyed by dotted name (``blocks.0.attn.w_k.3``) and always iterated in name
    order, so optimizers, manifests and gradient checks see the same sequence on every run.
    """

    def __init__(self):
        self._params = sortedcontainers.SortedDict()

    def add(self, name, value):
        """
        Register a new parameter.

        :param str name:    Dotted name; must be new.
        :param value:       Initial values (anything array-like).
        :returns:           The leaf tensor, with ``requires_grad`` set.
        """
        if name in self._params:
            raise ChMoEContractError("Parameter %s is already registered" % name)
        t = Tensor(value, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        try:
            return self._params[name]
        except KeyError:
            raise KeyError("No parameter named %s" % name)

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def __repr__(self):
        return "<ParameterStore: %d tensors, %d values>" % (len(self), self.num_values())

    def names(self):
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def group(self, prefix):
        """
        All parameters whose name starts with ``prefix + '.'``, in name order.
        """
        start = prefix + '.'
        return {k: self._params[k] for k in self._params.irange(start, prefix + '/', inclusive=(True, False))}

    def num_values(self, names=None):
        names = self._params.keys() if names is None else names
        return int(sum(self._params[n].size for n in names))

    def zero_grads(self):
        for t in self._params.values():
            t.grad = None

    def state(self):
        """
        A name -> numpy copy mapping of every value.
        """
        return {k: t.numpy() for k, t in self._params.items()}

    def load_state(self, state):
        missing = set(self._params) ^ set(state)
        if missing:
            raise ChMoEFormatError("Parameter sets differ on: %s" % ', '.join(sorted(missing)))
        for k, arr in state.items():
            t = self._params[k]
            if tuple(np.shape(arr)) != t.shape:
                raise ChMoEFormatError("Parameter %s has shape %s, checkpoint has %s" % (k, t.shape, np.shape(arr)))
            t.data[...] = arr

    def save(self, directory):
        write_manifest(directory, self._params)

    @classmethod
    def load(cls, directory):
        store = cls()
        for name, t in read_manifest(directory).items():
            store.add(name, t.data)
        return store


def write_manifest(directory, tensors, manifest=MANIFEST_NAME):
    """
    Write every tensor of the name -> tensor mapping `tensors` as its own MCT1 file under ``directory/tensors`` and
    index them in a plain-text manifest with one ``name path shape`` line per tensor.
    """
    os.makedirs(os.path.join(directory, 'tensors'), exist_ok=True)
    lines = []
    for name in sorted(tensors):
        t = tensors[name]
        rel = os.path.join('tensors', name + '.mct')
        save_tensor(t, os.path.join(directory, rel))
        lines.append('%s %s %s\n' % (name, rel, format_shape(t.shape)))
    with open(os.path.join(directory, manifest), 'w') as f:
        f.writelines(lines)
    l.debug("wrote %d tensors to %s", len(lines), directory)


def read_manifest(directory, manifest=MANIFEST_NAME):
    """
    Load every tensor listed in a manifest written by :func:`write_manifest`.

    :returns: A name -> :class:`Tensor` mapping in manifest order.
    """
    path = os.path.join(directory, manifest)
    if not os.path.isfile(path):
        raise FileNotFoundError("No manifest at %s" % path)
    out = {}
    with open(path, 'r') as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ChMoEFormatError("%s:%d: expected 'name path shape', got %r" % (path, lineno, line))
            name, rel, shape = parts
            try:
                expected = parse_shape(shape)
            except ChMoEConfigError:
                raise ChMoEFormatError("%s:%d: invalid shape %r" % (path, lineno, shape))
            t = load_tensor(os.path.join(directory, rel))
            if t.shape != expected:
                raise ChMoEFormatError("%s:%d: %s has shape %s, manifest says %s"
                                       % (path, lineno, name, t.shape, shape))
            out[name] = t
    return out
