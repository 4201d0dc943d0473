import logging

import numpy as np
import pytest

import chmoe
from chmoe.synthetic import SyntheticTask, Dataset, gen_synthetic, template_accuracy


def test_empty_dataset():
    data = gen_synthetic(SyntheticTask(), 0)
    assert len(data) == 0
    assert template_accuracy(SyntheticTask(), data) == 1.0
    with pytest.raises(chmoe.ChMoEConfigError):
        gen_synthetic(SyntheticTask(), -1)


def test_shapes_and_balance():
    task = SyntheticTask(channels=5, num_classes=3, signal_channels=(4,), height=8, width=12)
    data = gen_synthetic(task, 10)
    assert all(img.pixels.shape == (5, 8, 12) for img in data.images)
    counts = data.class_counts(3)
    assert counts.sum() == 10
    assert counts.max() - counts.min() <= 1
    images, labels = data.batch([3, 1])
    assert images[0] is data.images[3]
    assert labels.tolist() == [data.labels[3], data.labels[1]]


def test_deterministic_streams():
    task = SyntheticTask(seed=3, height=8, width=8)
    a, b = gen_synthetic(task, 6), gen_synthetic(task, 6)
    assert (a.labels == b.labels).all()
    assert all((x.pixels == y.pixels).all() for x, y in zip(a.images, b.images))
    other = gen_synthetic(task, 6, 1)
    held_out = gen_synthetic(task, 6, 0, 'eval_data')
    assert not (other.images[0].pixels == a.images[0].pixels).all()
    assert not (held_out.images[0].pixels == a.images[0].pixels).all()


def test_templates_are_orthogonal():
    task = SyntheticTask(num_classes=4, signal_channels=(1, 2), height=8, width=8, amplitude=2.0)
    t = task.templates
    assert t.shape == (4, 2, 8, 8)
    flat = t.reshape(4, -1)
    gram = flat @ flat.T
    off = gram - np.diag(np.diag(gram))
    assert np.abs(off).max() < 1e-9
    # per-pixel RMS equals the amplitude
    assert np.allclose(np.sqrt((flat ** 2).mean(axis=1)), 2.0, rtol=0, atol=1e-12)
    assert task.templates is t


def test_signal_lives_on_signal_channels():
    task = SyntheticTask(seed=1, channels=4, num_classes=2, signal_channels=(2,), height=8, width=8, noise=0.0)
    data = gen_synthetic(task, 4)
    for img, y in zip(data.images, data.labels):
        assert (img.pixels[[0, 1, 3]] == 0.0).all()
        assert np.allclose(img.pixels[2], task.templates[y][0], rtol=0, atol=1e-15)


def test_templates_separate_signal_tasks():
    task = SyntheticTask(seed=2, channels=8, num_classes=4, signal_channels=(1, 2), height=16, width=16)
    assert template_accuracy(task, gen_synthetic(task, 200, 0, 'eval_data')) >= 0.99


def test_generation_logs_template_accuracy(caplog):
    caplog.set_level(logging.DEBUG, logger='chmoe.synthetic')
    task = SyntheticTask(seed=2, channels=4, num_classes=2, signal_channels=(1,), height=8, width=8, noise=0.0)
    gen_synthetic(task, 6)
    assert 'template accuracy 1.000' in caplog.text

    caplog.clear()
    gen_synthetic(SyntheticTask(height=8, width=8, uniform=True), 6)
    assert 'generated 6 images' in caplog.text
    assert 'template accuracy' not in caplog.text


def test_uniform_task_has_no_signal():
    task = SyntheticTask(seed=2, num_classes=4, height=16, width=16, uniform=True)
    data = gen_synthetic(task, 2000, 0, 'eval_data')
    acc = template_accuracy(task, data)
    sigma = np.sqrt(0.25 * 0.75 / 2000)
    assert abs(acc - 0.25) < 4 * sigma


def test_task_validation():
    for kwargs in (dict(channels=0), dict(num_classes=0), dict(signal_channels=()), dict(signal_channels=(8,)),
                   dict(height=1, width=1, signal_channels=(0,), num_classes=2)):
        with pytest.raises(chmoe.ChMoEConfigError):
            SyntheticTask(**kwargs)
    SyntheticTask(signal_channels=(), uniform=True)


def test_dataset_wraps_lists():
    data = Dataset((x for x in []), [])
    assert len(data) == 0
    assert data.labels.dtype == np.int64


if __name__ == '__main__':
    logging.basicConfig(level=logging.DEBUG)
    for _name, _fn in sorted(globals().items()):
        if _name.startswith('test_') and callable(_fn):
            _fn()
