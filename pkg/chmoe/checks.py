"""
Property suites run by ``chmoe check``: finite-difference gradients, batched channel MoE against the per-token loop,
router invariants and the cost model against instrumented execution.

Every case draws from the ``check`` stream of the seed, split by suite and case number, so a failure can be replayed
from the printed counterexample alone.
"""

import logging
import collections

import numpy as np

from .attention import AttentionParams, build_batches, cross_attend, channel_moe, naive_oracle
from .cost_model import moe_cost, dense_cost, empirical_mac_count, uniform_routing
from .model import AttentionSpec, MoEViT
from .params import ParameterStore
from .router import RouterParams, route, tie_break
from .synthetic import SyntheticTask, gen_synthetic
from .tokenizer import TokenGrid
from .tensor import (Tensor, check_gradients, add, sub, mul, div, matmul, transpose, sum as tsum, mean, relu,
                     softmax_rows, layer_norm, index_select, index_add, take, scale_rows, concat_rows, slice_rows,
                     cross_entropy, attention)
from .rng import make_rng
from .errors import ChMoECheckError

__all__ = ('SUITES', 'CheckReport', 'run_checks', 'random_case', 'ORACLE_TOL', 'GRAD_TOL')

l = logging.getLogger(name=__name__)

ORACLE_TOL = 1e-12
GRAD_TOL = 1e-4

SUITE_IDS = {'gradients': 0, 'oracle': 1, 'router': 2, 'cost': 3}

Case = collections.namedtuple('Case', 'n_patches channels dim heads k with_cls mode')


class CheckReport:
    """
    :ivar collections.OrderedDict passed: Checks passed per suite.
    :ivar list failures:                  Counterexample dicts, in the order found.
    """

    def __init__(self):
        self.passed = collections.OrderedDict()
        self.failures = []

    @property
    def total(self):
        return sum(self.passed.values()) + len(self.failures)

    @property
    def ok(self):
        return not self.failures

    def record(self, suite, ok, counterexample=None):
        self.passed.setdefault(suite, 0)
        if ok:
            self.passed[suite] += 1
        else:
            counterexample = dict(counterexample or {}, suite=suite)
            l.error("check failed: %s", counterexample)
            self.failures.append(counterexample)


def random_case(rng, max_patches=8, max_channels=6, heads_choices=(1, 2, 4)):
    heads = int(rng.choice(heads_choices))
    channels = int(rng.integers(1, max_channels + 1))
    return Case(n_patches=int(rng.integers(1, max_patches + 1)), channels=channels, dim=heads * int(rng.integers(1, 5)),
                heads=heads, k=int(rng.integers(1, channels + 1)), with_cls=bool(rng.integers(0, 2)),
                mode=('gate', 'uniform')[int(rng.integers(0, 2))])


def build_case(case, rng):
    """
    Random tokens, projections and router for a case.

    :returns:   ``(grid, params, router)``.
    """
    store = ParameterStore()
    params = AttentionParams.init(store, rng, case.dim, case.heads, 'attn', experts=case.channels)
    router = RouterParams.init(store, rng, case.dim, case.channels, 'router')
    tokens = Tensor(rng.normal(0.0, 1.0, (case.n_patches * case.channels, case.dim)))
    cls = Tensor(rng.normal(0.0, 1.0, (1, case.dim))) if case.with_cls else None
    return TokenGrid(case.n_patches, tokens, cls, range(case.channels)), params, router


def _rows(grid):
    return grid.tokens.data if grid.cls is None else np.concatenate([grid.tokens.data, grid.cls.data])


#
# suites
#

def _op_losses(rng):
    """
    Small scalar losses, each exercising one op, over fresh leaf tensors.
    """
    def leaf(*shape):
        return Tensor(rng.normal(0.0, 1.0, shape), requires_grad=True)

    a, b, w = leaf(3, 4), leaf(3, 4), leaf(4, 5)
    pos = Tensor(rng.uniform(0.5, 1.5, (3, 4)), requires_grad=True)
    v, gamma, beta = leaf(4), leaf(4), leaf(4)
    q, kk, vv = leaf(3, 4), leaf(5, 4), leaf(5, 4)
    rw = leaf(3)
    idx = np.array([2, 0, 2])
    labels = np.array([1, 0, 3])
    weights = Tensor(rng.normal(0.0, 1.0, (3, 4)))

    def weighted(x):
        return tsum(mul(x, weights))

    return {
        'add': (lambda: weighted(add(a, v)), {'a': a, 'v': v}),
        'sub': (lambda: weighted(sub(a, b)), {'a': a, 'b': b}),
        'mul': (lambda: weighted(mul(a, b)), {'a': a, 'b': b}),
        'div': (lambda: weighted(div(a, pos)), {'a': a, 'pos': pos}),
        'matmul': (lambda: tsum(mul(matmul(a, w), matmul(a, w))), {'a': a, 'w': w}),
        'transpose': (lambda: weighted(transpose(transpose(a))), {'a': a}),
        'sum_axis': (lambda: tsum(mul(tsum(a, axis=0), v)), {'a': a, 'v': v}),
        'mean': (lambda: tsum(mul(mean(a, axis=1), rw)), {'a': a, 'rw': rw}),
        'relu': (lambda: weighted(relu(a)), {'a': a}),
        'softmax_rows': (lambda: weighted(softmax_rows(a)), {'a': a}),
        'layer_norm': (lambda: weighted(layer_norm(a, gamma, beta)), {'a': a, 'gamma': gamma, 'beta': beta}),
        'index_select': (lambda: weighted(index_select(a, idx)), {'a': a}),
        'index_select_cols': (lambda: tsum(mul(index_select(a, [3, 1], axis=1), weights.data[:, :2])), {'a': a}),
        'index_add': (lambda: weighted(index_add(a, idx, b)), {'a': a, 'b': b}),
        'take': (lambda: tsum(mul(take(a, idx, [0, 1, 3]), rw)), {'a': a, 'rw': rw}),
        'scale_rows': (lambda: weighted(scale_rows(a, rw)), {'a': a, 'rw': rw}),
        'concat_slice': (lambda: weighted(slice_rows(concat_rows([a, b]), 2, 5)), {'a': a, 'b': b}),
        'cross_entropy': (lambda: cross_entropy(a, labels), {'a': a}),
        'attention': (lambda: tsum(mul(attention(q, kk, vv, heads=2), weights)), {'q': q, 'k': kk, 'v': vv}),
    }


def tiny_spec(k=2, aggregation='gate', attention_kind='moe'):
    return AttentionSpec(height=8, width=8, patch=4, channels=3, dim=8, heads=2, layers=1, topk=k, num_classes=3,
                         aggregation=aggregation, attention=attention_kind)


def model_loss_fn(model, dataset):
    images, labels = dataset.batch(range(len(dataset)))

    def loss_fn():
        return model.loss(images, labels)[0]
    return loss_fn


def suite_gradients(report, seed, cases):
    rng = make_rng(seed, 'check', SUITE_IDS['gradients'], 0)
    for name, (fn, params) in _op_losses(rng).items():
        res = check_gradients(fn, params, tol=GRAD_TOL)
        worst, err = res.worst
        report.record('gradients', res.passed, {'seed': seed, 'op': name, 'param': worst, 'rel_error': err})

    model_cases = [(k, mode) for k in (1, 2, 3) for mode in ('gate', 'uniform')]
    for n, (k, mode) in enumerate(model_cases[:max(cases, 1)]):
        spec = tiny_spec(k, mode)
        model = MoEViT.init(spec, seed + n)
        data = gen_synthetic(SyntheticTask(seed=seed, channels=3, num_classes=3, signal_channels=(0,), height=8,
                                           width=8), 2, n, 'check')
        res = check_gradients(model_loss_fn(model, data), dict(model.store.items()), tol=GRAD_TOL, max_entries=6,
                              rng=make_rng(seed, 'check', SUITE_IDS['gradients'], n + 1))
        worst, err = res.worst
        report.record('gradients', res.passed, {'seed': seed, 'model': 'tiny k=%d %s' % (k, mode), 'param': worst,
                                                'rel_error': err})


def suite_oracle(report, seed, cases):
    for n in range(cases):
        rng = make_rng(seed, 'check', SUITE_IDS['oracle'], n)
        case = random_case(rng)
        grid, params, router = build_case(case, rng)
        routing = route(grid, router, case.k)
        batched = _rows(channel_moe(grid, routing, params, case.mode))
        naive = naive_oracle(grid, routing, params, case.mode).data
        dev = float(np.max(np.abs(batched - naive)))
        report.record('oracle', dev < ORACLE_TOL, {'seed': seed, 'case': n, 'config': case._asdict(),
                                                   'max_deviation': dev})

        _, weights = cross_attend(build_batches(grid, routing), params, return_weights=True)
        row_dev = max([float(np.max(np.abs(w.sum(axis=-1) - 1.0))) for w in weights if w is not None] or [0.0])
        report.record('oracle', row_dev < ORACLE_TOL, {'seed': seed, 'case': n, 'config': case._asdict(),
                                                       'row_sum_deviation': row_dev})


def _full_sort_support(row, k):
    return tuple(sorted(sorted(range(len(row)), key=lambda c: (-row[c], c))[:k]))


def suite_router(report, seed, cases):
    for n in range(cases):
        rng = make_rng(seed, 'check', SUITE_IDS['router'], n)
        case = random_case(rng)
        grid, _, router = build_case(case, rng)
        table = route(grid, router, case.k)
        gates = table.gates.data
        probs = table.probs.data
        cx = {'seed': seed, 'case': n, 'config': case._asdict()}

        nonzero = (gates != 0).sum(axis=1)
        report.record('router', bool((nonzero == case.k).all()), dict(cx, nonzeros=nonzero.tolist()))
        on = gates[gates != 0]
        report.record('router', bool(((on > 0) & (on <= 1)).all()), dict(cx, gate_range=(float(on.min()),
                                                                                          float(on.max()))))
        total = int(table.counts.sum())
        report.record('router', total == case.k * grid.num_tokens, dict(cx, total_sources=total))
        oracle = [_full_sort_support(row, case.k) for row in probs.tolist()]
        report.record('router', oracle == [tuple(r) for r in table.expert_sets.tolist()], dict(cx, support='full sort'))
        report.record('router', all(tie_break(row, case.k) == o for row, o in zip(probs, oracle)),
                      dict(cx, support='tie_break'))

        perm = rng.permutation(case.channels)
        permuted = RouterParams(Tensor(router.weight.data[:, perm]), Tensor(router.bias.data[perm]))
        ptable = route(grid, permuted, case.k)
        same_gates = np.allclose(ptable.gates.data, gates[:, perm], rtol=0.0, atol=1e-12)
        mapped = [tuple(sorted(int(perm[e]) for e in row)) for row in ptable.expert_sets]
        same_sets = mapped == [tuple(int(e) for e in row) for row in table.expert_sets]
        report.record('router', bool(same_gates and same_sets), dict(cx, permutation=perm.tolist()))


def suite_cost(report, seed, cases):
    for n in range(cases):
        rng = make_rng(seed, 'check', SUITE_IDS['cost'], n)
        case = random_case(rng)
        cx = {'seed': seed, 'case': n, 'config': case._asdict()}
        big_n, big_c, d = case.n_patches, case.channels, case.dim
        moe, dense = moe_cost(big_n, big_c, d, case.k), dense_cost(big_n, big_c, d)
        report.record('cost', moe.attention_flops * big_c == dense.attention_flops * case.k,
                      dict(cx, moe=moe.attention_flops, dense=dense.attention_flops))

        grid, params, _ = build_case(case, rng)
        measured = empirical_mac_count(grid, uniform_routing(big_n, big_c, case.k), params, case.mode)
        report.record('cost', measured.terms() == moe.terms(), dict(cx, measured=measured.terms(),
                                                                     analytic=moe.terms()))


SUITES = collections.OrderedDict([
    ('gradients', suite_gradients),
    ('oracle', suite_oracle),
    ('router', suite_router),
    ('cost', suite_cost),
])


def run_checks(seed=0, cases=100, suites=None, raise_on_failure=True):
    """
    Run the property suites.

    :param int seed:        Base seed.
    :param int cases:       Random cases per suite. Zero runs nothing.
    :param suites:          Names from :data:`SUITES`; all when None.
    :raises ChMoECheckError: On the first failing suite, if `raise_on_failure`; the error carries the first
                            counterexample.
    :rtype:                 CheckReport
    """
    report = CheckReport()
    if cases <= 0:
        l.warning("no check cases requested, nothing was run")
        return report
    for name in suites or SUITES:
        SUITES[name](report, seed, cases)
        if report.failures and raise_on_failure:
            raise ChMoECheckError("%d %s check(s) failed" % (len(report.failures), name),
                                  counterexample=report.failures[0])
    return report
