"""
Dense baselines: plain multi-head self-attention with one shared set of projections.

Over a channel-wise grid it attends across all ``N*C`` tokens; over a concatenated grid (one token per patch) it is the
standard vision-transformer block.
"""

import logging

from . import AttentionModule, AttentionParams, register_attention
from ..tensor import matmul, attention, concat_rows, slice_rows, scope

__all__ = ('DenseAttention', 'VanillaAttention', 'dense_channelwise_attention', 'vanilla_attention', 'self_attention')

l = logging.getLogger(name=__name__)


def self_attention(x, params):
    """
    ``Attention(x W_Q, x W_K, x W_V) W_O`` over the rows of `x`.
    """
    with scope('q_proj'):
        q = matmul(x, params.w_q)
    with scope('kv_proj'):
        k = matmul(x, params.w_k[0])
        v = matmul(x, params.w_v[0])
    with scope('attention'):
        o = attention(q, k, v, heads=params.heads)
    with scope('o_proj'):
        return matmul(o, params.w_o)


def _attend_grid(grid, params):
    n = grid.num_tokens
    if grid.cls is None:
        return grid.with_tokens(self_attention(grid.tokens, params))
    out = self_attention(concat_rows([grid.tokens, grid.cls]), params)
    return grid.with_tokens(slice_rows(out, 0, n), slice_rows(out, n, n + 1))


def dense_channelwise_attention(grid, params):
    """
    Self-attention across every patch token of every channel, CLS included.
    """
    return _attend_grid(grid, params)


def vanilla_attention(grid, params):
    """
    Self-attention across the patch tokens of a concatenated-channel grid, CLS included.
    """
    return _attend_grid(grid, params)


class DenseAttention(AttentionModule):
    """
    Shared-projection self-attention. Registered twice: ``dense`` for channel-wise grids, ``vanilla`` for
    concatenated-channel grids; the tokenizer makes the difference.
    """

    @classmethod
    def init(cls, store, rng, spec, prefix):
        AttentionParams.init(store, rng, spec.dim, spec.heads, prefix)
        return cls.from_store(store, spec, prefix)

    @classmethod
    def from_store(cls, store, spec, prefix):
        return cls(AttentionParams.from_store(store, prefix, None, spec.heads))

    def __call__(self, grid):
        return _attend_grid(grid, self.params), None


class VanillaAttention(DenseAttention):
    pass


register_attention('dense', DenseAttention)
register_attention('vanilla', VanillaAttention)
