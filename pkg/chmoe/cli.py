"""
The ``chmoe`` command.

Exit codes: 0 success, 1 a property or reference check failed, 2 usage/config/format error or missing file, 3 training
diverged.
"""

import sys
import logging
import argparse

from .config import load_config, parse_override
from .cost_model import (DATASETS, Geometry, cost_row, sweep, format_csv, format_table, verify_reference,
                         DEFAULT_DIM, DEFAULT_LAYERS, DEFAULT_HEADS)
from .checks import SUITES, run_checks
from .router import RouteStats
from .synthetic import gen_synthetic
from .training import train, load_checkpoint, load_model
from .errors import ChMoEConfigError, ChMoEFormatError, ChMoECheckError, ChMoETrainingError

__all__ = ('main', 'build_parser')

l = logging.getLogger(name=__name__)

EXIT_OK = 0
EXIT_CHECK = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3


def cmd_flops(args, out):
    if args.verify_paper:
        failed = 0
        for point, value, passed in verify_reference():
            if point.kind == 'greater':
                want = '> %g' % point.expected
            else:
                want = '%g +/- %g%%' % (point.expected, point.tolerance * 100)
            out.write('%s %s: %.6g (expected %s)\n' % ('PASS' if passed else 'FAIL', point.label, value, want))
            failed += not passed
        return EXIT_CHECK if failed else EXIT_OK

    models = ('vanilla', 'dense', 'moe') if args.model == 'all' else (args.model,)
    if args.dataset == 'custom':
        if args.n is None or args.c is None:
            raise ChMoEConfigError("--dataset custom needs --n and --c")
        if 'moe' in models and args.topk is None:
            raise ChMoEConfigError("--dataset custom needs --topk")
        patch = args.patch or 1
        geometry = Geometry(args.n * patch, patch, args.c, args.num_classes)
        rows = [cost_row(m, 'custom', patch, args.topk if m == 'moe' else None, args.d, args.layers, args.heads,
                         geometry) for m in models]
    else:
        datasets = sorted(DATASETS) if args.dataset == 'all' else (args.dataset,)
        patches = (args.patch,) if args.patch else (8, 16)
        ks = (args.topk,) if args.topk else (1, 2, 3, 4)
        rows = sweep(datasets, patches, ks, args.d, models, args.layers, args.heads)
        if not rows:
            raise ChMoEConfigError("No valid geometry in the requested sweep")
    out.write(format_table(rows) if args.format == 'table' else format_csv(rows))
    return EXIT_OK


def cmd_train(args, out):
    if args.resume:
        config, state = load_checkpoint(args.resume)
        for item in args.set:
            key, value = parse_override(item)
            config.set(key, value, '--set %s' % key)
    else:
        config = load_config(args.config, args.set)
        state = None
    if args.seed is not None:
        config.seed = args.seed
    config.validate()
    metrics = args.metrics if args.metrics else out
    state = train(config, state=state, checkpoint_dir=args.checkpoint, metrics_out=metrics)
    if state.history:
        l.info("finished at step %d, eval accuracy %.3f", state.step, state.history[-1].eval_acc)
    return EXIT_OK


def cmd_check(args, out):
    try:
        report = run_checks(args.seed, args.cases, args.suite or None)
    except ChMoECheckError as e:
        out.write('FAIL %s\n' % e)
        for key in sorted(e.counterexample):
            out.write('  %s: %s\n' % (key, e.counterexample[key]))
        return EXIT_CHECK
    for suite, count in report.passed.items():
        out.write('PASS %s: %d checks\n' % (suite, count))
    out.write('%d checks passed\n' % report.total)
    return EXIT_OK


def cmd_route_stats(args, out):
    config, model, _ = load_model(args.checkpoint)
    if not model.routes:
        raise ChMoEConfigError("A %s encoder does not route tokens" % model.spec.attention)
    if not 0 <= args.layer < model.spec.layers:
        raise ChMoEConfigError("Layer %d is out of range for %d layers" % (args.layer, model.spec.layers))
    task = config.task()
    if args.uniform:
        task.uniform = True
    data = gen_synthetic(task, args.count, args.seed, 'eval_data')
    stats = RouteStats(model.spec.channels)
    for start in range(0, len(data), args.batch):
        images, _ = data.batch(range(start, min(start + args.batch, len(data))))
        for table in model.forward(images).layer_routings(args.layer):
            stats.add(table)
    out.write('channel,importance,load,n_k\n')
    for channel, importance, load, n_k in stats.rows():
        out.write('%d,%.10g,%.10g,%d\n' % (channel, importance, load, n_k))
    l.info("load CV^2 over %d tokens: %.4g", stats.tokens, stats.load_cv_squared())
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog='chmoe', description="Channel mixture-of-experts vision encoder toolkit")
    parser.add_argument('--log-level', default='WARNING', choices=('DEBUG', 'INFO', 'WARNING', 'ERROR'))
    sub = parser.add_subparsers(dest='command')
    sub.required = True

    p = sub.add_parser('flops', help="attention cost tables")
    p.add_argument('--dataset', default='all', choices=sorted(DATASETS) + ['custom', 'all'])
    p.add_argument('--patch', type=int)
    p.add_argument('--topk', type=int)
    p.add_argument('--n', type=int, help="patch count for --dataset custom")
    p.add_argument('--c', type=int, help="channel count for --dataset custom")
    p.add_argument('--d', type=int, default=DEFAULT_DIM)
    p.add_argument('--model', default='moe', choices=('moe', 'dense', 'vanilla', 'all'))
    p.add_argument('--layers', type=int, default=DEFAULT_LAYERS)
    p.add_argument('--heads', type=int, default=DEFAULT_HEADS)
    p.add_argument('--num-classes', type=int, default=10)
    p.add_argument('--format', default='csv', choices=('csv', 'table'))
    p.add_argument('--verify-paper', action='store_true', help="check the published reference points")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser('train', help="train on a synthetic task")
    p.add_argument('--config')
    p.add_argument('--set', action='append', default=[], metavar='KEY=VALUE')
    p.add_argument('--seed', type=int)
    p.add_argument('--metrics', help="metrics CSV path (default: stdout)")
    p.add_argument('--checkpoint', help="write the final checkpoint to this directory")
    p.add_argument('--resume', help="continue from this checkpoint directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('check', help="run the property suites")
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--cases', type=int, default=100)
    p.add_argument('--suite', action='append', choices=list(SUITES))
    p.set_defaults(func=cmd_check)

    p = sub.add_parser('route-stats', help="per-channel routing statistics of a checkpoint")
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--layer', type=int, default=0)
    p.add_argument('--count', type=int, default=64)
    p.add_argument('--batch', type=int, default=16)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--uniform', action='store_true', help="use noise-only images")
    p.set_defaults(func=cmd_route_stats)
    return parser


def main(argv=None, out=None):
    out = out if out is not None else sys.stdout
    args = build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=getattr(logging, args.log_level),
                        format='%(levelname)s | %(name)s | %(message)s')
    try:
        return args.func(args, out)
    except ChMoECheckError as e:
        sys.stderr.write('check failed: %s\n' % e)
        return EXIT_CHECK
    except (ChMoEConfigError, ChMoEFormatError, FileNotFoundError) as e:
        sys.stderr.write('error: %s\n' % e)
        return EXIT_USAGE
    except ChMoETrainingError as e:
        sys.stderr.write('training failed at step %s: %s\n' % (e.step, e))
        return EXIT_NUMERIC


if __name__ == '__main__':
    sys.exit(main())
