import io
import os
import logging

import pytest

from chmoe.cli import main, EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_NUMERIC
from chmoe.cost_model import CSV_HEADER, REFERENCE_POINTS
from chmoe.tensor import ops

TINY_RUN = """
height = 8
width = 8
patch = 4
channels = 3
dim = 8
heads = 2
layers = 1
topk = 2
num_classes = 2
signal_channels = 1
train_size = 8
eval_size = 4
steps = 2
batch_size = 4
eval_interval = 1
lr = 1e-2
"""


def _run(*argv):
    out = io.StringIO()
    code = main(list(argv), out=out)
    return code, out.getvalue()


def _config(tmp_path, extra='', name='run.cfg'):
    path = tmp_path / name
    path.write_text(TINY_RUN + extra)
    return str(path)


def test_flops_single_row():
    code, text = _run('flops', '--dataset', 'jumpcp', '--patch', '16', '--topk', '2')
    assert code == EXIT_OK
    lines = text.splitlines()
    assert lines[0] == CSV_HEADER
    assert len(lines) == 2
    fields = lines[1].split(',')
    assert fields[:7] == ['moe', 'jumpcp', '196', '8', '384', '16', '2']
    assert fields[7].startswith('2.79')


def test_flops_custom_geometry():
    code, text = _run('flops', '--dataset', 'custom', '--n', '1', '--c', '1', '--topk', '1', '--d', '1',
                      '--heads', '1', '--layers', '1')
    assert code == EXIT_OK
    assert text.splitlines()[1].split(',')[7] == '1.2e-08'

    code, _ = _run('flops', '--dataset', 'custom', '--n', '4')
    assert code == EXIT_USAGE
    code, _ = _run('flops', '--dataset', 'custom', '--n', '4', '--c', '3', '--topk', '4')
    assert code == EXIT_USAGE


def test_flops_all_models_table():
    code, text = _run('flops', '--dataset', 'so2sat', '--patch', '8', '--model', 'all', '--format', 'table')
    assert code == EXIT_OK
    lines = text.splitlines()
    # header, rule, vanilla, dense, four top-k rows
    assert len(lines) == 8
    assert lines[2].split()[0] == 'vanilla'
    assert lines[3].split()[0] == 'dense'

    code, _ = _run('flops', '--dataset', 'so2sat', '--patch', '12')
    assert code == EXIT_USAGE


def test_flops_verify_reference_points():
    code, text = _run('flops', '--verify-paper')
    assert code == EXIT_OK
    lines = text.splitlines()
    assert len(lines) == len(REFERENCE_POINTS) + 1
    assert all(line.startswith('PASS ') for line in lines)


def test_check_without_cases():
    code, text = _run('check', '--cases', '0')
    assert code == EXIT_OK
    assert text.splitlines()[-1] == '0 checks passed'


def test_check_suites_pass():
    code, text = _run('check', '--cases', '2', '--suite', 'oracle', '--suite', 'router', '--suite', 'cost')
    assert code == EXIT_OK
    assert 'PASS oracle' in text
    assert 'PASS cost' in text


def test_check_catches_broken_gradient(monkeypatch):
    backward = ops.MatMul.backward

    def flipped(self, grad):
        return tuple(-g for g in backward(self, grad))

    monkeypatch.setattr(ops.MatMul, 'backward', flipped)
    code, text = _run('check', '--cases', '1', '--suite', 'gradients')
    assert code == EXIT_CHECK
    assert text.startswith('FAIL ')
    assert 'op: matmul' in text
    assert 'seed: 0' in text


def test_train_is_deterministic(tmp_path):
    cfg = _config(tmp_path)
    code, first = _run('train', '--config', cfg)
    assert code == EXIT_OK
    _, second = _run('train', '--config', cfg)
    assert first == second
    lines = first.splitlines()
    assert lines[0].startswith('step,')
    assert [line.split(',')[0] for line in lines[1:]] == ['1', '2']

    _, reseeded = _run('train', '--config', cfg, '--seed', '5')
    assert reseeded != first


def test_train_writes_metrics_and_checkpoint(tmp_path):
    cfg = _config(tmp_path)
    metrics = str(tmp_path / 'metrics.csv')
    ckpt = str(tmp_path / 'ckpt')
    code, text = _run('train', '--config', cfg, '--metrics', metrics, '--checkpoint', ckpt)
    assert code == EXIT_OK
    assert text == ''
    assert os.path.isfile(metrics)
    assert os.path.isfile(os.path.join(ckpt, 'manifest.txt'))

    code, text = _run('train', '--resume', ckpt, '--set', 'steps=3')
    assert code == EXIT_OK
    assert text.splitlines()[-1].startswith('3,')


def test_train_errors(tmp_path):
    cfg = _config(tmp_path)
    assert _run('train', '--config', cfg, '--set', 'bogus=1')[0] == EXIT_USAGE
    assert _run('train', '--config', _config(tmp_path, 'topk = 7\n', 'bad.cfg'))[0] == EXIT_USAGE
    assert _run('train', '--config', str(tmp_path / 'missing.cfg'))[0] == EXIT_USAGE
    assert _run('train', '--config', cfg, '--set', 'noise=nan')[0] == EXIT_NUMERIC


def test_route_stats(tmp_path):
    ckpt = str(tmp_path / 'ckpt')
    assert _run('train', '--config', _config(tmp_path), '--checkpoint', ckpt)[0] == EXIT_OK
    code, text = _run('route-stats', '--checkpoint', ckpt, '--count', '4', '--batch', '3')
    assert code == EXIT_OK
    lines = text.splitlines()
    assert lines[0] == 'channel,importance,load,n_k'
    rows = [line.split(',') for line in lines[1:]]
    assert [r[0] for r in rows] == ['0', '1', '2']
    # four images of four patches and three channels, two experts per token
    assert sum(int(r[3]) for r in rows) == 4 * 4 * 3 * 2
    assert abs(sum(float(r[1]) for r in rows) - 1.0) < 1e-6
    assert abs(sum(float(r[2]) for r in rows) - 2.0) < 1e-6

    assert _run('route-stats', '--checkpoint', ckpt, '--layer', '1')[0] == EXIT_USAGE
    assert _run('route-stats', '--checkpoint', str(tmp_path / 'nowhere'))[0] == EXIT_USAGE

    full = str(tmp_path / 'full')
    _run('train', '--config', _config(tmp_path, 'topk = 3\n', 'full.cfg'), '--checkpoint', full)
    code, text = _run('route-stats', '--checkpoint', full, '--count', '4', '--uniform')
    assert code == EXIT_OK
    for line in text.splitlines()[1:]:
        _, _, load, n_k = line.split(',')
        assert (float(load), int(n_k)) == (1.0, 4 * 4 * 3)

    dense = str(tmp_path / 'dense')
    _run('train', '--config', _config(tmp_path, 'attention = dense\n', 'dense.cfg'), '--checkpoint', dense)
    assert _run('route-stats', '--checkpoint', dense)[0] == EXIT_USAGE


def test_usage_errors():
    with pytest.raises(SystemExit) as e:
        main(['teleport'], out=io.StringIO())
    assert e.value.code == EXIT_USAGE
    with pytest.raises(SystemExit):
        main(['route-stats'], out=io.StringIO())


if __name__ == '__main__':
    logging.basicConfig(level=logging.DEBUG)
    import tempfile
    import pathlib
    for _name, _fn in sorted(globals().items()):
        if _name.startswith('test_') and callable(_fn) and _name != 'test_check_catches_broken_gradient':
            if _fn.__code__.co_argcount:
                _fn(pathlib.Path(tempfile.mkdtemp()))
            else:
                _fn()
