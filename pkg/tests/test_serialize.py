import io
import os
import struct

import numpy as np
import pytest

import chmoe
from chmoe.tensor import Tensor, dumps, loads, save_tensor, load_tensor, MCT_MAGIC
from chmoe.params import ParameterStore, write_manifest, read_manifest, MANIFEST_NAME


def test_mct_layout():
    blob = dumps(Tensor([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]))
    assert blob[:4] == MCT_MAGIC
    assert struct.unpack_from('<III', blob, 4) == (2, 2, 3)
    assert len(blob) == 4 + 4 + 8 + 6 * 8
    assert struct.unpack_from('<d', blob, 16)[0] == 1.0
    assert struct.unpack_from('<d', blob, 16 + 8 * 3)[0] == 4.0


def test_mct_scalar_and_specials():
    t = loads(dumps(Tensor(np.array(2.5))))
    assert t.shape == ()
    assert t.item() == 2.5
    special = np.array([np.nan, np.inf, -np.inf, -0.0, 5e-324])
    back = loads(dumps(special)).data
    assert np.isnan(back[0])
    assert back[1] == np.inf and back[2] == -np.inf
    assert np.signbit(back[3])
    assert back[4] == 5e-324


def test_mct_bit_exact():
    arr = np.random.default_rng(0).normal(0.0, 1.0, (3, 4, 2))
    back = loads(dumps(arr)).data
    assert back.tobytes() == arr.tobytes()


def test_mct_errors():
    good = dumps(Tensor([1.0, 2.0]))
    with pytest.raises(chmoe.ChMoEFormatError):
        loads(b'MCT2' + good[4:])
    with pytest.raises(chmoe.ChMoEFormatError):
        loads(good[:-3])
    with pytest.raises(chmoe.ChMoEFormatError):
        loads(good + b'\0' * 8)
    with pytest.raises(chmoe.ChMoEFormatError):
        loads(b'MC')


def test_mct_streams(tmp_path):
    buf = io.BytesIO()
    save_tensor(Tensor([7.0]), buf)
    assert load_tensor(buf).data.tolist() == [7.0]
    path = str(tmp_path / 'x.mct')
    save_tensor(Tensor([[1.0]]), path)
    assert load_tensor(path, requires_grad=True).requires_grad
    with pytest.raises(FileNotFoundError):
        load_tensor(str(tmp_path / 'missing.mct'))


def test_store_order_and_groups():
    store = ParameterStore()
    store.add('blocks.1.attn.w_q', np.zeros((2, 2)))
    store.add('blocks.0.mlp.b1', np.zeros(3))
    store.add('blocks.0.attn.w_q', np.zeros((2, 2)))
    store.add('head.weight', np.zeros((2, 4)))
    assert store.names() == ['blocks.0.attn.w_q', 'blocks.0.mlp.b1', 'blocks.1.attn.w_q', 'head.weight']
    assert list(store.group('blocks.0')) == ['blocks.0.attn.w_q', 'blocks.0.mlp.b1']
    assert list(store.group('blocks')) == ['blocks.0.attn.w_q', 'blocks.0.mlp.b1', 'blocks.1.attn.w_q']
    assert store.num_values() == 4 + 3 + 4 + 8
    assert store['head.weight'].requires_grad
    with pytest.raises(chmoe.ChMoEContractError):
        store.add('head.weight', np.zeros(1))
    with pytest.raises(KeyError):
        store['nope']


def test_store_state_round_trip(tmp_path):
    store = ParameterStore()
    store.add('a', np.arange(6.0).reshape(2, 3))
    store.add('b.c', np.array(3.0))
    store.save(str(tmp_path))
    lines = open(os.path.join(str(tmp_path), MANIFEST_NAME)).read().splitlines()
    assert lines == ['a %s 2x3' % os.path.join('tensors', 'a.mct'), 'b.c %s scalar' % os.path.join('tensors', 'b.c.mct')]

    back = ParameterStore.load(str(tmp_path))
    assert back.names() == store.names()
    assert (back['a'].data == store['a'].data).all()

    state = store.state()
    store['a'].data[...] = 0.0
    store.load_state(state)
    assert store['a'].data[1, 2] == 5.0
    with pytest.raises(chmoe.ChMoEFormatError):
        store.load_state({'a': np.zeros((2, 3))})
    with pytest.raises(chmoe.ChMoEFormatError):
        store.load_state({'a': np.zeros((3, 2)), 'b.c': np.array(1.0)})


def test_manifest_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_manifest(str(tmp_path))
    write_manifest(str(tmp_path), {'x': Tensor(np.zeros((2, 2)))})
    path = os.path.join(str(tmp_path), MANIFEST_NAME)
    with open(path, 'w') as f:
        f.write('x tensors/x.mct 4x1\n')
    with pytest.raises(chmoe.ChMoEFormatError):
        read_manifest(str(tmp_path))
    with open(path, 'w') as f:
        f.write('x tensors/x.mct\n')
    with pytest.raises(chmoe.ChMoEFormatError):
        read_manifest(str(tmp_path))
    with open(path, 'w') as f:
        f.write('x tensors/x.mct twoxtwo\n')
    with pytest.raises(chmoe.ChMoEFormatError):
        read_manifest(str(tmp_path))


if __name__ == '__main__':
    import tempfile
    import pathlib
    for _name, _fn in sorted(globals().items()):
        if _name.startswith('test_') and callable(_fn):
            if _fn.__code__.co_argcount:
                _fn(pathlib.Path(tempfile.mkdtemp()))
            else:
                _fn()
