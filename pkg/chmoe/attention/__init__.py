import logging

import numpy as np

l = logging.getLogger(name=__name__)


class AttentionParams:
    """
    Projection weights of one attention block.

    Channel-MoE blocks carry one key and one value expert per original channel id; dense blocks carry a single shared
    key and value projection (lists of length one).

    :ivar w_q:      ``[D x D]`` query projection, shared by every token.
    :ivar list w_k: ``[D x D]`` key projections, indexed by channel id.
    :ivar list w_v: ``[D x D]`` value projections, indexed by channel id.
    :ivar w_o:      ``[D x D]`` output projection.
    :ivar int heads: Number of heads.
    """

    __slots__ = ('w_q', 'w_k', 'w_v', 'w_o', 'heads')

    def __init__(self, w_q, w_k, w_v, w_o, heads):
        self.w_q = w_q
        self.w_k = list(w_k)
        self.w_v = list(w_v)
        self.w_o = w_o
        self.heads = heads

    @property
    def dim(self):
        return self.w_q.shape[0]

    @property
    def num_experts(self):
        return len(self.w_k)

    @classmethod
    def from_store(cls, store, prefix, experts, heads):
        if experts is None:
            w_k, w_v = [store[prefix + '.w_k']], [store[prefix + '.w_v']]
        else:
            w_k = [store['%s.w_k.%d' % (prefix, c)] for c in range(experts)]
            w_v = [store['%s.w_v.%d' % (prefix, c)] for c in range(experts)]
        return cls(store[prefix + '.w_q'], w_k, w_v, store[prefix + '.w_o'], heads)

    @classmethod
    def init(cls, store, rng, dim, heads, prefix, experts=None):
        """
        Register fresh projections. With `experts` None the key/value projections are shared.
        """
        std = 1.0 / np.sqrt(dim)
        store.add(prefix + '.w_q', rng.normal(0.0, std, (dim, dim)))
        if experts is None:
            store.add(prefix + '.w_k', rng.normal(0.0, std, (dim, dim)))
            store.add(prefix + '.w_v', rng.normal(0.0, std, (dim, dim)))
        else:
            for c in range(experts):
                store.add('%s.w_k.%d' % (prefix, c), rng.normal(0.0, std, (dim, dim)))
                store.add('%s.w_v.%d' % (prefix, c), rng.normal(0.0, std, (dim, dim)))
        store.add(prefix + '.w_o', rng.normal(0.0, std, (dim, dim)))
        return cls.from_store(store, prefix, experts, heads)


class AttentionModule:
    """
    Base class for the attention kinds an encoder block can use.

    Calling a module with a :class:`chmoe.tokenizer.TokenGrid` returns the attended grid (same rows, CLS included when
    present) and the routing table, which is None for kinds that do not route.

    :cvar str kind:         Registry name.
    :cvar bool routes:      Whether the module produces routing tables and a balance loss.
    """
    kind = None
    routes = False

    def __init__(self, params):
        self.params = params

    @classmethod
    def init(cls, store, rng, spec, prefix):
        raise NotImplementedError

    @classmethod
    def from_store(cls, store, spec, prefix):
        raise NotImplementedError

    def __call__(self, grid):
        raise NotImplementedError

    def __repr__(self):
        return "<%s attention, D=%d, %d heads>" % (self.kind, self.params.dim, self.params.heads)


ALL_ATTENTION = dict()


def register_attention(name, cls):
    cls.kind = name
    ALL_ATTENTION.update({name: cls})


def attention_kind(name):
    from ..errors import ChMoEConfigError
    try:
        return ALL_ATTENTION[name]
    except KeyError:
        raise ChMoEConfigError("Unknown attention kind %r (choose from %s)" % (name, ', '.join(sorted(ALL_ATTENTION))))


from .channel_moe import (ChannelMoEAttention, ChannelBatches, build_batches, cross_attend, cls_weights, aggregate,
                          channel_moe)
from .dense import DenseAttention, VanillaAttention, dense_channelwise_attention, vanilla_attention
from .oracle import naive_oracle
