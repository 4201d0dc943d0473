"""
Closed-form attention cost and activated-parameter accounting.

Conventions: one multiply-accumulate is two FLOPs, costs are for a single attention block (not multiplied by the
number of layers), and the CLS token is left out. Under these conventions, for N patches, C channels, width D and
top-k routing:

* channel MoE:  score + value ``4 N^2 C k D``; Q and O projections once per token ``2 N C D^2`` each; K and V for every
  channel ``4 N C D^2``. Total ``4 N^2 C k D + 8 N C D^2``.
* dense channel-wise (``T = N C`` tokens): ``4 T^2 D + 8 T D^2``.
* vanilla (``N`` tokens): ``4 N^2 D + 8 N D^2``.

The K/V term does not depend on k: keys and values are projected for every channel, whether or not any token routed
there.
"""

import logging
import dataclasses
import collections

import numpy as np

from .model import AttentionSpec
from .router import RoutingTable
from .tokenizer import TokenGrid, patch_grid
from .attention.channel_moe import channel_moe
from .tensor import Tensor, MacCounter
from .errors import ChMoEConfigError

__all__ = (
    'CostReport', 'CostRow', 'Geometry', 'DATASETS', 'moe_cost', 'dense_cost', 'vanilla_cost', 'activated_params',
    'sweep', 'cost_row', 'format_csv', 'format_table', 'CSV_HEADER', 'empirical_mac_count', 'uniform_routing',
    'ReferencePoint', 'REFERENCE_POINTS', 'verify_reference', 'ACT_PARAM_DELTA',
)

l = logging.getLogger(name=__name__)

CSV_HEADER = 'model,dataset,N,C,D,P,k,attn_gflops,act_params'


@dataclasses.dataclass
class CostReport:
    """
    FLOPs of one attention block, split by term.

    :ivar bool uniform:     False when measured on routing whose per-channel source counts differ.
    """
    attention_score_flops: int = 0
    attention_value_flops: int = 0
    q_proj_flops: int = 0
    kv_proj_flops: int = 0
    o_proj_flops: int = 0
    activated_params: int = None
    uniform: bool = True

    @property
    def attention_flops(self):
        return self.attention_score_flops + self.attention_value_flops

    @property
    def projection_flops(self):
        return self.q_proj_flops + self.kv_proj_flops + self.o_proj_flops

    @property
    def total_flops(self):
        return self.attention_flops + self.projection_flops

    @property
    def gflops(self):
        return self.total_flops / 1e9

    def terms(self):
        return (self.attention_score_flops, self.attention_value_flops, self.q_proj_flops, self.kv_proj_flops,
                self.o_proj_flops)


def _check_positive(**kwargs):
    for name, value in kwargs.items():
        if value < 1:
            raise ChMoEConfigError("%s must be positive, got %d" % (name, value))


def moe_cost(n, c, d, k):
    _check_positive(N=n, C=c, D=d)
    if not 1 <= k <= c:
        raise ChMoEConfigError("top-k %d is out of range for %d channels" % (k, c))
    attn = 2 * n * n * c * k * d
    return CostReport(attn, attn, 2 * n * c * d * d, 4 * n * c * d * d, 2 * n * c * d * d)


def dense_cost(n, c, d):
    _check_positive(N=n, C=c, D=d)
    return vanilla_cost(n * c, d)


def vanilla_cost(n, d):
    _check_positive(N=n, D=d)
    attn = 2 * n * n * d
    return CostReport(attn, attn, 2 * n * d * d, 4 * n * d * d, 2 * n * d * d)


def activated_params(spec, k=None):
    """
    Number of parameter values a forward pass touches: everything except the key/value experts of unselected
    channels. For channel MoE that is all shared weights plus ``k`` key/value pairs per layer; for the baselines it is
    every parameter.

    :param AttentionSpec spec:  The encoder.
    :param int k:               Experts per token; defaults to ``spec.topk``.
    """
    k = spec.topk if k is None else k
    d, p, c, n = spec.dim, spec.patch, spec.channels, spec.n_patches
    hidden = d * spec.mlp_ratio
    if spec.attention == 'vanilla':
        embed = p * p * c * d + n * d + d
    else:
        embed = p * p * d + n * d + c * d + 2 * d * d + 2 * d + d
    block = 4 * d + d * hidden + hidden + hidden * d + d
    if spec.attention == 'moe':
        if not 1 <= k <= c:
            raise ChMoEConfigError("top-k %d is out of range for %d channels" % (k, c))
        block += 2 * d * d + d * c + c + k * 2 * d * d
    else:
        block += 4 * d * d
    head = 2 * d + d * spec.num_classes + spec.num_classes
    return embed + spec.layers * block + head


Geometry = collections.namedtuple('Geometry', 'height width channels num_classes')

DATASETS = {
    'jumpcp': Geometry(224, 224, 8, 161),
    'so2sat': Geometry(32, 32, 18, 17),
}

# ViT-Small
DEFAULT_DIM = 384
DEFAULT_HEADS = 6
DEFAULT_LAYERS = 12

CostRow = collections.namedtuple('CostRow', 'model dataset N C D P k attn_gflops act_params')


def _spec_for(model, geometry, patch, k, dim, layers, heads):
    return AttentionSpec(height=geometry.height, width=geometry.width, patch=patch, channels=geometry.channels,
                         dim=dim, heads=heads, layers=layers, topk=k if model == 'moe' else 1,
                         num_classes=geometry.num_classes, attention=model)


def cost_row(model, dataset, patch, k=None, dim=DEFAULT_DIM, layers=DEFAULT_LAYERS, heads=DEFAULT_HEADS,
             geometry=None):
    """
    One output row. Non-routing models report k as 0.

    :param str model:       ``moe``, ``dense`` or ``vanilla``.
    :param str dataset:     A key of :data:`DATASETS`, or any label when `geometry` is given.
    """
    if geometry is None:
        try:
            geometry = DATASETS[dataset]
        except KeyError:
            raise ChMoEConfigError("Unknown dataset %r (choose from %s)" % (dataset, ', '.join(sorted(DATASETS))))
    gh, gw = patch_grid(geometry.height, geometry.width, patch)
    n, c = gh * gw, geometry.channels
    if model == 'moe':
        report = moe_cost(n, c, dim, k)
    elif model == 'dense':
        report = dense_cost(n, c, dim)
    elif model == 'vanilla':
        report = vanilla_cost(n, dim)
    else:
        raise ChMoEConfigError("Unknown model %r" % (model,))
    spec = _spec_for(model, geometry, patch, k, dim, layers, heads)
    return CostRow(model, dataset, n, c, dim, patch, k if model == 'moe' else 0, report.gflops,
                   activated_params(spec))


def sweep(datasets=('jumpcp', 'so2sat'), patches=(8, 16), ks=(1, 2, 3, 4), dim=DEFAULT_DIM, models=('moe', 'dense'),
          layers=DEFAULT_LAYERS, heads=DEFAULT_HEADS):
    """
    Cost rows over a grid of datasets, patch sizes and top-k values. Each (dataset, P) gets one row per valid k for
    channel MoE and one row per baseline model. Patch sizes that do not divide a dataset's images are skipped.
    """
    rows = []
    for name in datasets:
        geometry = DATASETS[name]
        for p in patches:
            if geometry.height % p or geometry.width % p:
                l.warning("patch size %d does not divide %s images, skipping", p, name)
                continue
            for model in models:
                if model == 'moe':
                    rows.extend(cost_row('moe', name, p, k, dim, layers, heads) for k in ks if k <= geometry.channels)
                else:
                    rows.append(cost_row(model, name, p, None, dim, layers, heads))
    return rows


def format_csv(rows):
    lines = [CSV_HEADER]
    for r in rows:
        lines.append('%s,%s,%d,%d,%d,%d,%d,%s,%d' % (r.model, r.dataset, r.N, r.C, r.D, r.P, r.k,
                                                     '%.6g' % r.attn_gflops, r.act_params))
    return '\n'.join(lines) + '\n'


def format_table(rows):
    """
    The same rows as :func:`format_csv`, as a right-aligned text table.
    """
    header = CSV_HEADER.split(',')
    cells = [header]
    for r in rows:
        cells.append([r.model, r.dataset, str(r.N), str(r.C), str(r.D), str(r.P), str(r.k) if r.k else '-',
                      '%.4g' % r.attn_gflops, '%.2fM' % (r.act_params / 1e6)])
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    lines = ['  '.join(cell.rjust(w) for cell, w in zip(row, widths)) for row in cells]
    lines.insert(1, '  '.join('-' * w for w in widths))
    return '\n'.join(lines) + '\n'


#
# measured cost
#

def uniform_routing(n_patches, channels, k):
    """
    A routing table that sends token ``(i, j)`` to channels ``j, j+1, ..., j+k-1`` (mod C) with gate ``1/k`` each, so
    every channel receives exactly ``k N`` sources.
    """
    if not 1 <= k <= channels:
        raise ChMoEConfigError("top-k %d is out of range for %d channels" % (k, channels))
    t = n_patches * channels
    j = np.tile(np.arange(channels), n_patches)
    sets = np.sort((j[:, None] + np.arange(k)[None, :]) % channels, axis=1)
    gates = np.zeros((t, channels))
    gates[np.arange(t)[:, None], sets] = 1.0 / k
    probs = np.full((t, channels), 1.0 / channels)
    return RoutingTable(Tensor(gates), Tensor(probs), sets, range(channels))


def empirical_mac_count(grid, routing, params, mode='gate'):
    """
    Run the channel MoE block on `grid` under a :class:`chmoe.tensor.MacCounter` and report what it executed, in
    FLOPs. The CLS row, if any, is dropped first so the numbers compare with :func:`moe_cost`.

    Projections always match the closed form. The attention terms equal ``4 D sum_c N_c M_c``, which is the closed
    form whenever ``sum_c N_c = k N C``; reports over routing with unequal per-channel counts have ``uniform`` False.
    """
    grid = TokenGrid(grid.n_patches, grid.tokens, None, grid.active_channels)
    with MacCounter() as counter:
        channel_moe(grid, routing, params, mode)
    counts = routing.counts
    uniform = bool((counts == counts[0]).all()) if len(counts) else True
    if not uniform:
        l.warning("routing is not uniform (source counts %s); attention terms reflect actual counts",
                  counts.tolist())
    attn = counter.counts['attention']
    return CostReport(attn, attn, 2 * counter.counts['q_proj'], 2 * counter.counts['kv_proj'],
                      2 * counter.counts['o_proj'], uniform=uniform)


#
# reference points
#

ReferencePoint = collections.namedtuple('ReferencePoint', 'label model dataset patch k expected tolerance kind')

REFERENCE_POINTS = (
    ReferencePoint('jumpcp P=16 vanilla', 'vanilla', 'jumpcp', 16, None, 0.29, 0.02, 'approx'),
    ReferencePoint('jumpcp P=16 dense (channel-adaptive)', 'dense', 'jumpcp', 16, None, 5.65, 0.01, 'approx'),
    ReferencePoint('jumpcp P=16 dense (diverse channels)', 'dense', 'jumpcp', 16, None, 5.65, 0.01, 'approx'),
    ReferencePoint('jumpcp P=16 moe k=1', 'moe', 'jumpcp', 16, 1, 2.33, 0.01, 'approx'),
    ReferencePoint('jumpcp P=16 moe k=2', 'moe', 'jumpcp', 16, 2, 2.81, 0.01, 'approx'),
    ReferencePoint('so2sat P=8 vanilla', 'vanilla', 'so2sat', 8, None, 0.02, 0.10, 'approx'),
    ReferencePoint('so2sat P=8 dense', 'dense', 'so2sat', 8, None, 0.47, 0.02, 'approx'),
    ReferencePoint('so2sat P=8 moe k=1', 'moe', 'so2sat', 8, 1, 0.35, 0.02, 'approx'),
    ReferencePoint('so2sat P=8 moe k=2', 'moe', 'so2sat', 8, 2, 0.36, 0.02, 'approx'),
    ReferencePoint('jumpcp P=8 moe k=1', 'moe', 'jumpcp', 8, 1, 15.02, 0.015, 'approx'),
    ReferencePoint('jumpcp P=8 moe k=2', 'moe', 'jumpcp', 8, 2, 22.61, 0.015, 'approx'),
    ReferencePoint('jumpcp P=8 moe k=3', 'moe', 'jumpcp', 8, 3, 30.19, 0.015, 'approx'),
    ReferencePoint('jumpcp P=8 moe k=4', 'moe', 'jumpcp', 8, 4, 37.77, 0.015, 'approx'),
    ReferencePoint('so2sat P=16 moe k=2', 'moe', 'so2sat', 16, 2, 0.085, 0.02, 'approx'),
    ReferencePoint('jumpcp P=8 dense', 'dense', 'jumpcp', 8, None, 65.0, None, 'greater'),
)

# Activated parameters gained going from top-1 to top-2 at ViT-Small scale, in millions.
ACT_PARAM_DELTA = ReferencePoint('jumpcp P=16 act params k=1 -> k=2', 'moe', 'jumpcp', 16, (1, 2), 3.56, 0.01,
                                 'delta')


def _evaluate_point(point):
    if point.kind == 'delta':
        k1, k2 = point.k
        a = cost_row('moe', point.dataset, point.patch, k1).act_params
        b = cost_row('moe', point.dataset, point.patch, k2).act_params
        value = (b - a) / 1e6
    else:
        value = cost_row(point.model, point.dataset, point.patch, point.k).attn_gflops
    if point.kind == 'greater':
        return value, value > point.expected
    return value, abs(value - point.expected) <= point.tolerance * point.expected


def verify_reference(points=REFERENCE_POINTS + (ACT_PARAM_DELTA,)):
    """
    Evaluate every reference point.

    :returns:   A list of ``(point, value, passed)``.
    """
    return [(p,) + _evaluate_point(p) for p in points]
