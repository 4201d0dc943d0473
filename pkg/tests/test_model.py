import logging

import numpy as np
import pytest

import chmoe
from chmoe.config import RunConfig
from chmoe.model import AttentionSpec, MoEViT, accuracy, predict
from chmoe.router import RouteStats
from chmoe.tokenizer import MultiChannelImage
from chmoe.tensor import Tensor, backward, check_gradients
from chmoe.rng import make_rng

TINY = AttentionSpec(height=8, width=8, patch=4, channels=3, dim=8, heads=2, layers=1, topk=2, num_classes=4)


def _images(spec, count, seed=0):
    rng = make_rng(seed, 'data')
    return [MultiChannelImage(rng.normal(0.0, 1.0, (spec.channels, spec.height, spec.width))) for _ in range(count)]


def test_spec_defaults_and_validation():
    spec = AttentionSpec().validate()
    assert spec.n_patches == 16
    assert (spec.channels, spec.dim, spec.heads, spec.layers, spec.topk) == (8, 64, 4, 2, 2)
    bad = [
        dict(topk=0), dict(topk=9), dict(heads=5), dict(patch=5), dict(aggregation='max'), dict(attention='sparse'),
        dict(hcs=True, attention='vanilla'), dict(dim=0), dict(layers=-1),
    ]
    for changes in bad:
        with pytest.raises(chmoe.ChMoEConfigError):
            spec.replace(**changes).validate()
    spec.replace(layers=0).validate()
    spec.replace(hcs=True, attention='dense').validate()


def test_parameter_names():
    model = MoEViT.init(TINY, 0)
    names = set(model.store.names())
    for name in ('embed.w_e', 'embed.chan', 'embed.cls', 'blocks.0.norm1.gamma', 'blocks.0.attn.w_q',
                 'blocks.0.attn.w_k.0', 'blocks.0.attn.w_v.2', 'blocks.0.attn.w_o', 'blocks.0.attn.router.weight',
                 'blocks.0.mlp.w1', 'norm.beta', 'head.weight', 'head.bias'):
        assert name in names
    assert model.routes
    # rebuilding over the same store shares every tensor
    again = MoEViT(TINY, model.store)
    assert again.blocks[0].attn.params.w_q is model.blocks[0].attn.params.w_q


def test_init_is_seeded():
    a = MoEViT.init(TINY, 3).store.state()
    b = MoEViT.init(TINY, 3).store.state()
    c = MoEViT.init(TINY, 4).store.state()
    assert all((a[k] == b[k]).all() for k in a)
    assert any((a[k] != c[k]).any() for k in a)


def test_zero_layers_ignore_the_image():
    model = MoEViT.init(TINY.replace(layers=0), 0)
    logits = model.forward(_images(TINY, 3)).logits.data
    assert (logits == logits[0]).all()
    cls = model.store['embed.cls'].data
    g, b = model.store['norm.gamma'].data, model.store['norm.beta'].data
    h = (cls - cls.mean()) / np.sqrt(cls.var() + 1e-6) * g + b
    want = h @ model.store['head.weight'].data + model.store['head.bias'].data
    assert np.allclose(logits[0], want[0], rtol=0, atol=1e-12)


def test_identical_images_identical_rows():
    model = MoEViT.init(TINY, 1)
    img = _images(TINY, 1)[0]
    result = model.forward([img, img, img])
    logits = result.logits.data
    assert logits.shape == (3, 4)
    assert (logits == logits[0]).all()
    assert len(result.routings) == 3
    assert len(result.layer_routings(0)) == 3


def test_forward_errors():
    model = MoEViT.init(TINY, 0)
    with pytest.raises(chmoe.ChMoEConfigError):
        model.forward([])
    with pytest.raises(chmoe.ChMoEConfigError):
        model.forward([MultiChannelImage(np.zeros((2, 8, 8)))])
    with pytest.raises(chmoe.ChMoEConfigError):
        model.forward([MultiChannelImage(np.zeros((3, 8, 12)))])


def _gradcheck(spec, seed):
    model = MoEViT.init(spec, seed)
    rng = make_rng(seed, 'check')
    # lift the init scale of the tables so small perturbations move the loss measurably
    for name in ('embed.pos', 'embed.chan', 'embed.cls'):
        model.store[name].data[...] = rng.normal(0.0, 0.5, model.store[name].shape)
    images = _images(spec, 2, seed)
    labels = [1, 3]

    def loss():
        return model.loss(images, labels, None, 0.01, 0.01)[0]

    return check_gradients(loss, dict(model.store.items()), tol=1e-4, max_entries=6, rng=rng)


def test_full_model_gradients():
    for k in (1, 2, 3):
        for mode in ('gate', 'uniform'):
            res = _gradcheck(TINY.replace(topk=k, aggregation=mode), 10 + k)
            assert res.passed, (k, mode, res.failures())


def test_baseline_gradients():
    for kind in ('dense', 'vanilla'):
        res = _gradcheck(TINY.replace(attention=kind), 20)
        assert res.passed, (kind, res.failures())


def test_every_parameter_learns():
    model = MoEViT.init(TINY.replace(layers=2), 5)
    images = _images(TINY, 4, 5)
    total, _, bal, _ = model.loss(images, [0, 1, 2, 3])
    assert bal.item() > 0.0
    backward(total)
    for name, p in model.store.items():
        assert p.grad is not None, name
        assert np.abs(p.grad).max() > 0.0, name


def test_channel_sampling_gradients():
    model = MoEViT.init(TINY, 6)
    images = _images(TINY, 2, 6)
    total, _, _, result = model.loss(images, [0, 1], [(0, 2), (2,)])
    backward(total)
    store = model.store
    assert store['blocks.0.attn.w_k.1'].grad is None
    assert store['blocks.0.attn.w_v.1'].grad is None
    assert store['blocks.0.attn.w_k.2'].grad is not None
    assert (store['embed.chan'].grad[1] == 0.0).all()
    assert (store['blocks.0.attn.router.weight'].grad[:, 1] == 0.0).all()
    assert result.routings[0][0].active_channels == (0, 2)
    assert result.routings[1][0].active_channels == (2,)
    assert result.routings[1][0].k == 1


def test_non_routing_models():
    for kind in ('dense', 'vanilla'):
        model = MoEViT.init(TINY.replace(attention=kind), 0)
        assert not model.routes
        total, ce, bal, result = model.loss(_images(TINY, 2), [0, 1])
        assert bal.item() == 0.0
        assert total.item() == ce.item()
        assert result.layer_routings(0) == []
    assert 'embed.chan' not in MoEViT.init(TINY.replace(attention='vanilla'), 0).store


def test_balance_sums_layers_and_averages_images():
    model = MoEViT.init(TINY.replace(layers=2), 7)
    result = model.forward(_images(TINY, 2, 7))
    want = 0.0
    for per_image in result.routings:
        for r in per_image:
            want += chmoe.balance_loss(r.probs, r.k).item()
    assert abs(model.balance(result).item() - want / 2) < 1e-15


def test_predict_and_accuracy():
    logits = Tensor([[0.0, 2.0, 1.0], [5.0, 5.0, 0.0], [0.0, 0.0, 0.0]])
    assert predict(logits).tolist() == [1, 0, 0]
    assert accuracy(logits, [1, 0, 0]) == 1.0
    assert accuracy(logits.data[:1], [2]) in (0.0, 1.0)
    with pytest.raises(chmoe.ChMoEConfigError):
        accuracy(np.zeros((0, 3)), [])

    rng = make_rng(0, 'check')
    n, c = 20000, 4
    acc = accuracy(rng.normal(0.0, 1.0, (n, c)), rng.integers(0, c, n))
    sigma = np.sqrt((1.0 / c) * (1 - 1.0 / c) / n)
    assert abs(acc - 1.0 / c) < 3 * sigma


def test_untrained_load_is_uniform_over_inits():
    # channel experts are exchangeable at init, so on noise images each channel's load averages to k/C over seeds
    spec = RunConfig(uniform=True).spec()
    loads = []
    for seed in range(32):
        model = MoEViT.init(spec, seed)
        stats = RouteStats(spec.channels)
        for table in model.forward(_images(spec, 2, seed)).layer_routings(0):
            stats.add(table)
        loads.append(stats.n_k / stats.tokens)
    loads = np.array(loads)
    sigma = loads.std(axis=0, ddof=1) / np.sqrt(len(loads))
    assert (np.abs(loads.mean(axis=0) - spec.topk / spec.channels) < 3 * sigma).all(), loads.mean(axis=0)


if __name__ == '__main__':
    logging.basicConfig(level=logging.DEBUG)
    for _name, _fn in sorted(globals().items()):
        if _name.startswith('test_') and callable(_fn):
            _fn()
