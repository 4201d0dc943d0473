"""
A deliberately naive channel MoE: explicit loops over channels, tokens and selected experts, one query at a time, plain
numpy, no gathers. It exists to check the batched path against.
"""

import math

import numpy as np

from ..tensor import Tensor, softmax_array
from ..errors import ChMoEConfigError, ChMoEContractError

__all__ = ('naive_oracle',)


def _attend_one(q, keys, values, heads):
    width = q.shape[0]
    dh = width // heads
    out = np.zeros(width)
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        scores = keys[:, sl] @ q[sl] / math.sqrt(dh)
        out[sl] = softmax_array(scores) @ values[:, sl]
    return out


def naive_oracle(grid, routing, params, mode='gate'):
    """
    Compute the channel MoE block output token by token.

    :returns:   A constant :class:`Tensor` ``[rows x D]``: one row per patch token, then the CLS row if the grid has one.
    """
    if mode not in ('gate', 'uniform'):
        raise ChMoEConfigError("Unknown aggregation mode %r" % (mode,))
    h = grid.tokens.data
    n_ch = grid.channels
    n = grid.n_patches
    w_q = params.w_q.data
    heads = params.heads

    keys, values = [], []
    for c in range(n_ch):
        channel = grid.active_channels[c]
        target = np.array([h[i * n_ch + c] for i in range(n)])
        keys.append(target @ params.w_k[channel].data)
        values.append(target @ params.w_v[channel].data)

    gates = routing.gates.data
    rows = []
    for i in range(n):
        for j in range(n_ch):
            t = i * n_ch + j
            experts = [int(e) for e in routing.expert_sets[t]]
            if not experts:
                raise ChMoEContractError("Token %d has an empty expert set" % t)
            q = h[t] @ w_q
            acc = np.zeros(h.shape[1])
            for c in experts:
                if len(keys[c]) == 0:
                    raise ChMoEContractError("Channel position %d has no targets" % c)
                weight = gates[t, c] if mode == 'gate' else 1.0 / len(experts)
                acc += weight * _attend_one(q, keys[c], values[c], heads)
            rows.append(acc @ params.w_o.data)

    if grid.cls is not None:
        q = grid.cls.data[0] @ w_q
        probs = routing.probs.data
        acc = np.zeros(h.shape[1])
        for c in range(n_ch):
            weight = probs[:, c].sum() / len(probs) if mode == 'gate' else 1.0 / n_ch
            acc += weight * _attend_one(q, keys[c], values[c], heads)
        rows.append(acc @ params.w_o.data)

    return Tensor(np.array(rows).reshape(len(rows), h.shape[1]))
