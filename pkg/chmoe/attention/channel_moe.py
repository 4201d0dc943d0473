"""
Multi-head channel mixture-of-experts attention.

Every token is a source routed to k channel experts. The expert of channel c attends from its source tokens to the
targets of channel c (all patch tokens of that channel) through a query projection shared by everyone and a key/value
projection owned by the channel. A token's outputs from its experts are mixed by its gate values (or uniformly) and
passed through the output projection.

The CLS token, when present, is a source of every channel and a target of none. It weighs each channel by the mean
routing probability of the grid's patch tokens (``1/C`` under uniform aggregation).

The per-channel work (gather, key/value projection, attention) has no cross-channel dependencies; only the scatter
back into token rows accumulates into shared rows. This implementation runs the channels sequentially, in channel
position order, and folds all channels into one scatter so the result is deterministic.
"""

import logging

import numpy as np

from . import AttentionModule, AttentionParams, register_attention
from ..tensor import (Tensor, matmul, mean, attention, index_select, index_add, take, scale_rows, concat_rows,
                      slice_rows, scope)
from ..router import RouterParams, route
from ..errors import ChMoEConfigError, ChMoEContractError

__all__ = ('ChannelMoEAttention', 'ChannelBatches', 'build_batches', 'cross_attend', 'cls_weights', 'aggregate',
           'channel_moe', 'AGGREGATION_MODES')

l = logging.getLogger(name=__name__)

AGGREGATION_MODES = ('gate', 'uniform')


class ChannelBatches:
    """
    The per-channel source and target row sets of one token grid.

    Source and target matrices are gathered on demand from `features` so callers that only need provenance never pay
    for the copy.

    :ivar features:         ``[(T + cls) x D]`` patch tokens followed by the CLS row, if any.
    :vartype features:      Tensor
    :ivar list sources:     Per channel position, the feature rows routed to it (ascending token ids, CLS last).
    :ivar list targets:     Per channel position, the feature rows of that channel's patch tokens, in spatial order.
    :ivar tuple active_channels: Original channel id of each position.
    :ivar cls_row:          Feature row of the CLS token, or None.
    """

    __slots__ = ('features', 'sources', 'targets', 'active_channels', 'cls_row')

    def __init__(self, features, sources, targets, active_channels, cls_row=None):
        self.features = features
        self.sources = sources
        self.targets = targets
        self.active_channels = tuple(active_channels)
        self.cls_row = cls_row

    @property
    def num_channels(self):
        return len(self.sources)

    def source(self, c):
        """
        ``S_c``: the feature rows routed to channel position `c`.
        """
        return index_select(self.features, self.sources[c])

    def target(self, c):
        """
        ``T_c``: the patch tokens of channel position `c`.
        """
        return index_select(self.features, self.targets[c])

    def provenance(self, c):
        return self.sources[c]

    @property
    def source_counts(self):
        return np.array([len(s) for s in self.sources], dtype=np.int64)

    @property
    def target_counts(self):
        return np.array([len(t) for t in self.targets], dtype=np.int64)

    def __repr__(self):
        return "<ChannelBatches: %d channels, sources %s>" % (self.num_channels, self.source_counts.tolist())


def build_batches(grid, routing):
    """
    Assemble the source and target row sets of every channel position from a grid and the routing of its tokens.
    """
    routing.validate(grid)
    if grid.cls is None:
        features = grid.tokens
        sources = list(routing.sources)
    else:
        features = concat_rows([grid.tokens, grid.cls])
        sources = [np.append(s, grid.cls_row) for s in routing.sources]
    targets = [grid.channel_rows(c) for c in range(grid.channels)]
    return ChannelBatches(features, sources, targets, grid.active_channels, grid.cls_row)


def cross_attend(batches, params, return_weights=False):
    """
    Run every channel expert: ``O_c = Attention(S_c W_Q, T_c W_K[c], T_c W_V[c])``.

    Queries are projected once per feature row and gathered per channel. Keys and values are projected for every
    active channel, routed to or not.

    :returns:   One ``[N_c x D]`` output per channel position, None where nothing was routed. With `return_weights`, a
                second list holds each channel's ``[heads x N_c x M_c]`` attention weights (None likewise).
    """
    with scope('q_proj'):
        q_all = matmul(batches.features, params.w_q)

    outputs = []
    weights = []
    for c, channel in enumerate(batches.active_channels):
        if not 0 <= channel < params.num_experts:
            raise ChMoEConfigError("Channel id %d has no key/value expert (%d experts)" % (channel, params.num_experts))
        target = batches.target(c)
        with scope('kv_proj'):
            k_c = matmul(target, params.w_k[channel])
            v_c = matmul(target, params.w_v[channel])
        src = batches.sources[c]
        if len(src) == 0:
            outputs.append(None)
            weights.append(None)
            continue
        if len(batches.targets[c]) == 0:
            raise ChMoEContractError("Channel position %d has %d routed sources but no targets" % (c, len(src)))
        with scope('attention'):
            res = attention(index_select(q_all, src), k_c, v_c, heads=params.heads, return_weights=return_weights)
        if return_weights:
            outputs.append(res[0])
            weights.append(res[1])
        else:
            outputs.append(res)
    if return_weights:
        return outputs, weights
    return outputs


def cls_weights(routing):
    """
    The CLS row's weight on every channel position in ``gate`` mode: the mean routing probability the grid's patch
    tokens give that channel. Sums to 1 and carries gradient into the router.
    """
    return mean(routing.probs, axis=0)


def aggregate(outputs, batches, routing, params, mode='gate'):
    """
    Mix every token's expert outputs and apply the output projection.

    In ``gate`` mode token ``t`` receives ``sum_c gates[t, c] * O_c[row of t]``; in ``uniform`` mode every selected
    expert weighs ``1/k``. The CLS row weighs channel ``c`` by :func:`cls_weights` in ``gate`` mode and by ``1/C`` in
    ``uniform`` mode.

    :returns:   ``[rows x D]`` over the feature rows of `batches`.
    """
    if mode not in AGGREGATION_MODES:
        raise ChMoEConfigError("Unknown aggregation mode %r (choose from %s)" % (mode, ', '.join(AGGREGATION_MODES)))
    rows = batches.features.shape[0]
    n_ch = routing.num_channels
    cls_row = batches.cls_row
    cls_w = cls_weights(routing) if mode == 'gate' and cls_row is not None else None

    pieces, weights, dest = [], [], []
    for c, o in enumerate(outputs):
        if o is None:
            continue
        src = batches.sources[c]
        pieces.append(o)
        dest.append(src)
        if mode == 'gate':
            # CLS, when present, is the last source of every channel
            patch = src if cls_w is None else src[:-1]
            w = take(routing.gates, patch, np.full(len(patch), c))
            if cls_w is not None:
                w = concat_rows([w, index_select(cls_w, [c])])
            weights.append(w)
        else:
            w = np.full(len(src), 1.0 / routing.k)
            if cls_row is not None:
                w[src == cls_row] = 1.0 / n_ch
            weights.append(Tensor(w))

    if not pieces:
        raise ChMoEContractError("No token was routed to any expert")
    dest = np.concatenate(dest)
    covered = np.bincount(dest, minlength=rows)
    if not covered.all():
        raise ChMoEContractError("Token %d has an empty expert set" % int(np.flatnonzero(covered == 0)[0]))

    mixed = scale_rows(concat_rows(pieces), concat_rows(weights))
    mixed = index_add(Tensor.zeros((rows, params.dim)), dest, mixed)
    with scope('o_proj'):
        return matmul(mixed, params.w_o)


def channel_moe(grid, routing, params, mode='gate'):
    """
    The full block on one routed grid: batches, experts, aggregation.

    :returns:   A :class:`chmoe.tokenizer.TokenGrid` with the attended tokens (and CLS row).
    """
    batches = build_batches(grid, routing)
    out = aggregate(cross_attend(batches, params), batches, routing, params, mode)
    n = grid.num_tokens
    cls = slice_rows(out, n, n + 1) if grid.cls is not None else None
    return grid.with_tokens(slice_rows(out, 0, n), cls)


class ChannelMoEAttention(AttentionModule):
    """
    An encoder block's channel MoE attention: its own router plus one key/value expert per channel.

    :ivar params:       :class:`AttentionParams`, one expert per original channel id.
    :ivar router:       :class:`chmoe.router.RouterParams`.
    :ivar int k:        Experts per token.
    :ivar str aggregation: ``gate`` or ``uniform``.
    :ivar bool renormalize: Rescale Top-K gates to sum 1.
    """
    routes = True

    def __init__(self, params, router, k, aggregation='gate', renormalize=False):
        super().__init__(params)
        if aggregation not in AGGREGATION_MODES:
            raise ChMoEConfigError("Unknown aggregation mode %r" % (aggregation,))
        self.router = router
        self.k = k
        self.aggregation = aggregation
        self.renormalize = renormalize

    @classmethod
    def init(cls, store, rng, spec, prefix):
        AttentionParams.init(store, rng, spec.dim, spec.heads, prefix, experts=spec.channels)
        RouterParams.init(store, rng, spec.dim, spec.channels, prefix + '.router')
        return cls.from_store(store, spec, prefix)

    @classmethod
    def from_store(cls, store, spec, prefix):
        params = AttentionParams.from_store(store, prefix, spec.channels, spec.heads)
        router = RouterParams.from_store(store, prefix + '.router')
        return cls(params, router, spec.topk, spec.aggregation, spec.renormalize)

    def __call__(self, grid):
        routing = route(grid, self.router, self.k, self.renormalize)
        return channel_moe(grid, routing, self.params, self.aggregation), routing


register_attention('moe', ChannelMoEAttention)
