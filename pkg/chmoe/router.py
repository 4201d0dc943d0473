"""
Channel routing: one affine gate per encoder layer scores every token against every channel expert, keeps the top k
scores and records which tokens visit which channel.

Channel positions are local to the token grid. When hierarchical channel sampling drops channels, only the active
channels take part in the softmax, and ``RoutingTable.active_channels`` maps local positions back to the original
channel ids the expert parameters are keyed by.
"""

import logging

import numpy as np

from .tensor import Tensor, matmul, add, sub, mul, div, mean, sum as tsum, softmax_rows, index_select, scale_rows
from .errors import ChMoEConfigError, ChMoEContractError, ChMoEDimensionError

__all__ = (
    'RouterParams', 'RoutingTable', 'route', 'tie_break', 'topk_support', 'balance_loss', 'cv_squared',
    'load_cv_squared', 'router_mass', 'RouteStats', 'DEFAULT_BALANCE_WEIGHT', 'CV_EPS',
)

l = logging.getLogger(name=__name__)

DEFAULT_BALANCE_WEIGHT = 0.01
CV_EPS = 1e-10


class RouterParams:
    """
    :ivar weight:   ``[D x C_max]`` gate weight.
    :ivar bias:     ``[C_max]`` gate bias.
    """

    __slots__ = ('weight', 'bias')

    def __init__(self, weight, bias):
        if weight.ndim != 2 or bias.shape != (weight.shape[1],):
            raise ChMoEDimensionError("Router weight %s and bias %s disagree on the expert count"
                                      % (weight.shape, bias.shape))
        self.weight = weight
        self.bias = bias

    @property
    def num_experts(self):
        return self.weight.shape[1]

    @classmethod
    def from_store(cls, store, prefix):
        return cls(store[prefix + '.weight'], store[prefix + '.bias'])

    @classmethod
    def init(cls, store, rng, dim, experts, prefix):
        """
        Haar-random orthonormal gate columns (rows when ``dim < experts``) and a zero bias. The channel experts are
        exchangeable at init.
        """
        draw = rng.normal(0.0, 1.0, (dim, experts))
        wide = dim < experts
        q, r = np.linalg.qr(draw.T if wide else draw)
        q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
        store.add(prefix + '.weight', np.ascontiguousarray(q.T if wide else q))
        store.add(prefix + '.bias', np.zeros(experts))
        return cls.from_store(store, prefix)


def tie_break(values, k):
    """
    Indices of the k largest entries of a vector, ascending. Among equal values the lower index wins.
    """
    values = np.asarray(values.data if isinstance(values, Tensor) else values, dtype=np.float64)
    if not 0 <= k <= values.shape[-1]:
        raise ChMoEConfigError("Cannot pick %d of %d entries" % (k, values.shape[-1]))
    return tuple(sorted(int(x) for x in np.argsort(-values, kind='stable')[:k]))


def topk_support(probs, k):
    """
    Row-wise :func:`tie_break` over a matrix.

    :returns:   A ``[rows x k]`` integer array, each row ascending.
    """
    order = np.argsort(-probs, axis=1, kind='stable')[:, :k]
    return np.sort(order, axis=1)


class RoutingTable:
    """
    The routing decision for one token grid. Immutable once built.

    :ivar gates:            ``[T x C]`` Top-K gate values, zero off the support. ``T`` tokens, ``C`` active channels.
    :vartype gates:         Tensor
    :ivar probs:            ``[T x C]`` gate softmax before Top-K.
    :vartype probs:         Tensor
    :ivar expert_sets:      ``[T x k]`` selected channel positions of every token, ascending.
    :ivar list sources:     Per channel position, the ascending flat ids of the tokens routed to it. Row ``r`` of the
                            channel's source matrix is token ``sources[c][r]``.
    :ivar tuple active_channels: Original channel id of each channel position.
    :ivar int k:            Experts per token.
    """

    __slots__ = ('gates', 'probs', 'expert_sets', 'sources', 'active_channels', 'k')

    def __init__(self, gates, probs, expert_sets, active_channels):
        self.gates = gates
        self.probs = probs
        self.expert_sets = expert_sets
        self.active_channels = tuple(active_channels)
        self.k = expert_sets.shape[1]
        membership = np.zeros(gates.shape, dtype=bool)
        membership[np.arange(gates.shape[0])[:, None], expert_sets] = True
        self.sources = [np.flatnonzero(membership[:, c]) for c in range(gates.shape[1])]

    @property
    def num_tokens(self):
        return self.gates.shape[0]

    @property
    def num_channels(self):
        return self.gates.shape[1]

    @property
    def counts(self):
        """
        ``N_k`` for every channel position.
        """
        return np.array([len(s) for s in self.sources], dtype=np.int64)

    def source_row(self, channel, token):
        """
        The row of `channel`'s source matrix holding `token`.
        """
        src = self.sources[channel]
        r = int(np.searchsorted(src, token))
        if r == len(src) or src[r] != token:
            raise ChMoEContractError("Token %d is not routed to channel position %d" % (token, channel))
        return r

    def validate(self, grid):
        """
        Check that this table routes exactly the tokens and channel positions of `grid`.
        """
        if self.num_tokens != grid.num_tokens or self.num_channels != grid.channels:
            raise ChMoEContractError("Routing for %d tokens x %d channels does not match a grid of %d tokens x %d "
                                     "channels" % (self.num_tokens, self.num_channels, grid.num_tokens, grid.channels))
        if self.active_channels != grid.active_channels:
            raise ChMoEContractError("Routing was computed for channels %s, grid has %s"
                                     % (self.active_channels, grid.active_channels))
        if self.k < 1:
            raise ChMoEContractError("Every token needs at least one expert")

    def __repr__(self):
        return "<RoutingTable %d tokens, %d channels, k=%d>" % (self.num_tokens, self.num_channels, self.k)


def route(grid, params, k, renormalize=False):
    """
    Route every patch token of `grid` to k channel experts.

    ``probs = softmax((h - mean(h)) W + b)`` over the active channels, where ``mean(h)`` is the mean token of the grid;
    the gates keep the k largest probabilities unchanged and zero the rest, unless `renormalize` rescales the survivors
    to sum 1. If fewer than k channels are active, every active channel is selected.

    :param TokenGrid grid:      The tokens to route.
    :param RouterParams params: The layer's gate.
    :param int k:               Experts per token, ``1 <= k <= C_max``.
    """
    if not 1 <= k <= params.num_experts:
        raise ChMoEConfigError("top-k %d is out of range for %d channel experts" % (k, params.num_experts))
    if grid.dim != params.weight.shape[0]:
        raise ChMoEDimensionError("Router expects width %d, tokens have width %d" % (params.weight.shape[0], grid.dim))
    for c in grid.active_channels:
        if not 0 <= c < params.num_experts:
            raise ChMoEConfigError("Channel id %d has no expert (router covers %d)" % (c, params.num_experts))

    centered = sub(grid.tokens, mean(grid.tokens, axis=0))
    logits = add(matmul(centered, params.weight), params.bias)
    if grid.active_channels != tuple(range(params.num_experts)):
        logits = index_select(logits, grid.active_channels, axis=1)
    probs = softmax_rows(logits)

    k_eff = min(k, grid.channels)
    support = topk_support(probs.data, k_eff)
    mask = np.zeros(probs.shape)
    mask[np.arange(probs.shape[0])[:, None], support] = 1.0
    gates = mul(probs, Tensor(mask))
    if renormalize:
        gates = scale_rows(gates, div(1.0, tsum(gates, axis=1)))

    table = RoutingTable(gates, probs, support, grid.active_channels)
    if l.isEnabledFor(logging.DEBUG):
        l.debug("routed %d tokens, k=%d, counts %s", table.num_tokens, k_eff, table.counts.tolist())
    return table


def cv_squared(x):
    """
    Squared coefficient of variation ``var(x) / (mean(x)^2 + eps)`` of a vector tensor, population variance.
    """
    m = mean(x)
    d = sub(x, m)
    return div(mean(mul(d, d)), add(mul(m, m), CV_EPS))


def load_cv_squared(counts):
    """
    :func:`cv_squared` of hard per-channel counts, as a float.
    """
    counts = np.asarray(counts, dtype=np.float64)
    m = counts.mean()
    return float(counts.var() / (m * m + CV_EPS))


def balance_loss(probs, k, w_importance=DEFAULT_BALANCE_WEIGHT, w_load=DEFAULT_BALANCE_WEIGHT):
    """
    Importance/load balancing: ``w_importance * CV^2(importance) + w_load * CV^2(load)``.

    Importance is the column sum of the pre-Top-K softmax and carries gradient. Load is the number of tokens whose
    Top-K support contains each channel; it is a hard count and contributes a constant.

    :param probs:   ``[T x C]`` softmax rows (``RoutingTable.probs``).
    :param int k:   Experts per token.
    """
    if probs.ndim != 2:
        raise ChMoEDimensionError("balance_loss expects [tokens x channels] probabilities, got %s" % (probs.shape,))
    importance = tsum(probs, axis=0)
    loss = mul(cv_squared(importance), w_importance)
    if w_load:
        support = topk_support(probs.data, min(k, probs.shape[1]))
        load = np.bincount(support.reshape(-1), minlength=probs.shape[1])
        loss = add(loss, w_load * load_cv_squared(load))
    return loss


def router_mass(tables, max_channels):
    """
    Mean pre-Top-K gate probability each original channel receives per token, over a set of routing tables. A channel
    contributes zero mass to grids it was absent from.
    """
    mass = np.zeros(max_channels)
    tokens = 0
    for t in tables:
        mass[list(t.active_channels)] += t.probs.data.sum(axis=0)
        tokens += t.num_tokens
    return mass / max(tokens, 1)


class RouteStats:
    """
    Accumulates per-channel routing statistics of one layer over many token grids.

    :ivar importance:   Total pre-Top-K probability mass per original channel.
    :ivar n_k:          Number of tokens routed to each original channel.
    :ivar int tokens:   Tokens seen.
    :ivar int k:        Experts per token of the last table added.
    """

    def __init__(self, max_channels):
        self.importance = np.zeros(max_channels)
        self.n_k = np.zeros(max_channels, dtype=np.int64)
        self.tokens = 0
        self.k = 0

    def add(self, table):
        idx = list(table.active_channels)
        self.importance[idx] += table.probs.data.sum(axis=0)
        self.n_k[idx] += table.counts
        self.tokens += table.num_tokens
        self.k = table.k

    def rows(self):
        """
        ``(channel, importance, load, n_k)`` per channel: importance as mean mass per token, load as the fraction of
        tokens routed to the channel.
        """
        denom = max(self.tokens, 1)
        for c in range(len(self.n_k)):
            yield c, self.importance[c] / denom, self.n_k[c] / denom, int(self.n_k[c])

    def load_cv_squared(self):
        return load_cv_squared(self.n_k)
