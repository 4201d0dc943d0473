"""
The MCT1 tensor container: magic ``b"MCT1"``, rank as a little-endian u32, one u32 per extent, then the values as
row-major little-endian 64-bit floats.
"""

import struct
import logging

import numpy as np

from .tensor import Tensor
from ..errors import ChMoEFormatError
from ..utils import stream_or_path

__all__ = ('MCT_MAGIC', 'dumps', 'loads', 'save_tensor', 'load_tensor')

l = logging.getLogger(name=__name__)

MCT_MAGIC = b'MCT1'


def dumps(tensor):
    """
    Serialize a :class:`Tensor` (or anything array-like) into MCT1 bytes.
    """
    arr = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor, dtype=np.float64)
    header = struct.pack('<4sI', MCT_MAGIC, arr.ndim) + struct.pack('<%dI' % arr.ndim, *arr.shape)
    return header + np.ascontiguousarray(arr, dtype='<f8').tobytes()


def loads(data, requires_grad=False):
    """
    Parse MCT1 bytes into a :class:`Tensor`.
    """
    try:
        magic, rank = struct.unpack_from('<4sI', data, 0)
    except struct.error:
        raise ChMoEFormatError("Truncated MCT1 header (%d bytes)" % len(data))
    if magic != MCT_MAGIC:
        raise ChMoEFormatError("Bad magic %r, expected %r" % (magic, MCT_MAGIC))
    offset = 8
    try:
        shape = struct.unpack_from('<%dI' % rank, data, offset)
    except struct.error:
        raise ChMoEFormatError("Truncated MCT1 extents: rank %d" % rank)
    offset += 4 * rank
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    if len(data) - offset != 8 * count:
        raise ChMoEFormatError("MCT1 payload is %d bytes, shape %s needs %d" % (len(data) - offset, shape, 8 * count))
    arr = np.frombuffer(data, dtype='<f8', count=count, offset=offset).astype(np.float64).reshape(shape)
    return Tensor(arr, requires_grad=requires_grad)


def save_tensor(tensor, target):
    with stream_or_path(target, 'wb') as f:
        f.write(dumps(tensor))


def load_tensor(source, requires_grad=False):
    with stream_or_path(source, 'rb') as f:
        return loads(f.read(), requires_grad=requires_grad)
