"""
Turning multi-channel images into channel-wise token grids.

Every channel is patchified on its own. The token of spatial patch ``i`` (raster order over the patch grid) and active
channel position ``j`` lives at flat row ``i * C + j`` of the grid, where ``C`` is the number of active channels, so
``i = id // C`` and ``j = id % C``.
"""

import logging

import numpy as np

from .tensor import Tensor, matmul, add, relu, index_select, save_tensor, load_tensor
from .errors import ChMoEConfigError, ChMoEDimensionError

__all__ = (
    'MultiChannelImage', 'TokenGrid', 'EmbeddingParams', 'ConcatEmbeddingParams', 'patch_grid', 'patchify',
    'unpatchify', 'patchify_concat', 'embed_pre_ffn', 'embed', 'embed_concat', 'hcs_sample', 'flat_id', 'split_id',
)

l = logging.getLogger(name=__name__)


class MultiChannelImage:
    """
    A ``C x H x W`` image with any number of channels.

    :ivar pixels:   The pixel values, channel-major.
    :vartype pixels: numpy.ndarray
    """

    __slots__ = ('pixels',)

    def __init__(self, pixels):
        pixels = np.array(pixels, dtype=np.float64)
        if pixels.ndim != 3:
            raise ChMoEDimensionError("An image needs C x H x W pixels, got shape %s" % (pixels.shape,))
        if pixels.shape[0] < 1:
            raise ChMoEConfigError("An image needs at least one channel")
        self.pixels = pixels

    @property
    def channels(self):
        return self.pixels.shape[0]

    @property
    def height(self):
        return self.pixels.shape[1]

    @property
    def width(self):
        return self.pixels.shape[2]

    def select_channels(self, channels):
        """
        A new image holding only `channels`, in the given order.
        """
        return MultiChannelImage(self.pixels[list(channels)])

    def save(self, target):
        save_tensor(self.pixels, target)

    @classmethod
    def load(cls, source):
        return cls(load_tensor(source).data)

    def __repr__(self):
        return "<MultiChannelImage %dx%d, %d channels>" % (self.height, self.width, self.channels)


def patch_grid(height, width, patch):
    """
    :returns:   The patch grid ``(rows, cols)``.
    """
    if patch < 1 or height % patch or width % patch:
        raise ChMoEConfigError("Patch size %d does not divide a %dx%d image" % (patch, height, width))
    return height // patch, width // patch


def flat_id(i, j, channels):
    return i * channels + j


def split_id(token, channels):
    return divmod(token, channels)


def patchify(img, patch):
    """
    Cut every channel into non-overlapping ``patch x patch`` blocks.

    :returns:   A ``[(N*C) x P^2]`` array; row ``i*C + j`` is block ``i`` of channel ``j``, flattened row-major.
    """
    gh, gw = patch_grid(img.height, img.width, patch)
    c = img.channels
    blocks = img.pixels.reshape(c, gh, patch, gw, patch).transpose(1, 3, 0, 2, 4)
    return blocks.reshape(gh * gw * c, patch * patch).copy()


def unpatchify(patches, channels, height, width, patch):
    """
    Inverse of :func:`patchify`.
    """
    gh, gw = patch_grid(height, width, patch)
    patches = np.asarray(patches, dtype=np.float64)
    if patches.shape != (gh * gw * channels, patch * patch):
        raise ChMoEDimensionError("Cannot rebuild a %dx%dx%d image from patches of shape %s"
                                  % (channels, height, width, patches.shape))
    blocks = patches.reshape(gh, gw, channels, patch, patch).transpose(2, 0, 3, 1, 4)
    return MultiChannelImage(blocks.reshape(channels, height, width))


def patchify_concat(img, patch):
    """
    The concatenated form: one ``P^2 * C`` row per spatial patch, channels outermost within a row.
    """
    gh, gw = patch_grid(img.height, img.width, patch)
    c = img.channels
    blocks = img.pixels.reshape(c, gh, patch, gw, patch).transpose(1, 3, 0, 2, 4)
    return blocks.reshape(gh * gw, c * patch * patch).copy()


class TokenGrid:
    """
    The ``N x C`` grid of D-dimensional token embeddings of one image, plus an optional CLS row.

    :ivar int n_patches:        N, the number of spatial patches.
    :ivar tokens:               ``[(N*C) x D]`` embeddings in flat-id order.
    :vartype tokens:            Tensor
    :ivar cls:                  ``[1 x D]`` CLS embedding, or None.
    :vartype cls:               Tensor or None
    :ivar tuple active_channels: Original channel id of every channel position, in position order.
    """

    __slots__ = ('n_patches', 'tokens', 'cls', 'active_channels')

    def __init__(self, n_patches, tokens, cls=None, active_channels=None):
        if active_channels is None:
            active_channels = tuple(range(tokens.shape[0] // max(n_patches, 1)))
        self.n_patches = n_patches
        self.tokens = tokens
        self.cls = cls
        self.active_channels = tuple(int(c) for c in active_channels)
        if tokens.ndim != 2 or tokens.shape[0] != n_patches * len(self.active_channels):
            raise ChMoEDimensionError("TokenGrid: %s tokens for %d patches x %d channels"
                                      % (tokens.shape, n_patches, len(self.active_channels)))
        if cls is not None and cls.shape != (1, tokens.shape[1]):
            raise ChMoEDimensionError("TokenGrid: CLS row has shape %s for width %d" % (cls.shape, tokens.shape[1]))

    @property
    def channels(self):
        return len(self.active_channels)

    @property
    def dim(self):
        return self.tokens.shape[1]

    @property
    def num_tokens(self):
        return self.tokens.shape[0]

    @property
    def cls_row(self):
        """
        The flat row the CLS token takes when it is stacked under the patch tokens, or None.
        """
        return None if self.cls is None else self.num_tokens

    def channel_rows(self, j):
        """
        Flat ids of every token of channel position `j`, in spatial order.
        """
        return np.arange(self.n_patches) * self.channels + j

    def with_tokens(self, tokens, cls=None):
        return TokenGrid(self.n_patches, tokens, cls, self.active_channels)

    def __repr__(self):
        return "<TokenGrid N=%d C=%d D=%d%s>" % (self.n_patches, self.channels, self.dim,
                                                  ", cls" if self.cls is not None else "")


class EmbeddingParams:
    """
    Channel-wise patch embedding: a patch projection shared by all channels, positional and channel tables, the
    per-token FFN and the CLS seed.

    :ivar w_e:      ``[P^2 x D]`` patch projection.
    :ivar pos:      ``[N x D]`` table indexed by spatial position.
    :ivar chan:     ``[C_max x D]`` table indexed by original channel id.
    :ivar ffn_w1:   ``[D x D]``, with ``ffn_b1`` ``[D]``.
    :ivar ffn_w2:   ``[D x D]``, with ``ffn_b2`` ``[D]``.
    :ivar cls:      ``[1 x D]`` CLS seed.
    """

    FIELDS = ('w_e', 'pos', 'chan', 'ffn_w1', 'ffn_b1', 'ffn_w2', 'ffn_b2', 'cls')
    __slots__ = FIELDS

    def __init__(self, **tensors):
        for k in self.FIELDS:
            setattr(self, k, tensors[k])

    @property
    def max_channels(self):
        return self.chan.shape[0]

    @property
    def n_patches(self):
        return self.pos.shape[0]

    @classmethod
    def from_store(cls, store, prefix='embed'):
        return cls(**{k: store['%s.%s' % (prefix, k)] for k in cls.FIELDS})

    @classmethod
    def init(cls, store, rng, patch, n_patches, max_channels, dim, prefix='embed'):
        p2 = patch * patch
        store.add(prefix + '.w_e', rng.normal(0.0, 1.0 / np.sqrt(p2), (p2, dim)))
        store.add(prefix + '.pos', rng.normal(0.0, 0.02, (n_patches, dim)))
        store.add(prefix + '.chan', rng.normal(0.0, 0.02, (max_channels, dim)))
        store.add(prefix + '.ffn_w1', rng.normal(0.0, 1.0 / np.sqrt(dim), (dim, dim)))
        store.add(prefix + '.ffn_b1', np.zeros(dim))
        store.add(prefix + '.ffn_w2', rng.normal(0.0, 1.0 / np.sqrt(dim), (dim, dim)))
        store.add(prefix + '.ffn_b2', np.zeros(dim))
        store.add(prefix + '.cls', rng.normal(0.0, 0.02, (1, dim)))
        return cls.from_store(store, prefix)


class ConcatEmbeddingParams:
    """
    Patch embedding over concatenated channels, for the vanilla encoder.

    :ivar w_e:  ``[(P^2*C) x D]`` projection.
    :ivar pos:  ``[N x D]`` positional table.
    :ivar cls:  ``[1 x D]`` CLS seed.
    """

    FIELDS = ('w_e', 'pos', 'cls')
    __slots__ = FIELDS

    def __init__(self, **tensors):
        for k in self.FIELDS:
            setattr(self, k, tensors[k])

    @classmethod
    def from_store(cls, store, prefix='embed'):
        return cls(**{k: store['%s.%s' % (prefix, k)] for k in cls.FIELDS})

    @classmethod
    def init(cls, store, rng, patch, n_patches, channels, dim, prefix='embed'):
        width = patch * patch * channels
        store.add(prefix + '.w_e', rng.normal(0.0, 1.0 / np.sqrt(width), (width, dim)))
        store.add(prefix + '.pos', rng.normal(0.0, 0.02, (n_patches, dim)))
        store.add(prefix + '.cls', rng.normal(0.0, 0.02, (1, dim)))
        return cls.from_store(store, prefix)


def _check_channels(params, active_channels):
    for c in active_channels:
        if not 0 <= c < params.max_channels:
            raise ChMoEConfigError("Channel id %d is outside the channel table (%d entries)" % (c, params.max_channels))


def embed_pre_ffn(patches, params, active_channels):
    """
    ``patch_{i,j} W_e + pos_i + chan_j`` for every token, with ``chan`` looked up by original channel id.

    :param patches:         ``[(N*C) x P^2]`` array from :func:`patchify`.
    :param params:          :class:`EmbeddingParams`.
    :param active_channels: Original channel id of each channel position.
    """
    active_channels = tuple(active_channels)
    _check_channels(params, active_channels)
    n = params.n_patches
    c = len(active_channels)
    patches = patches if isinstance(patches, Tensor) else Tensor(patches)
    if patches.shape[0] != n * c:
        raise ChMoEDimensionError("Got %d patch rows, expected %d patches x %d channels" % (patches.shape[0], n, c))
    if patches.shape[1] != params.w_e.shape[0]:
        raise ChMoEDimensionError("Patches of width %d do not fit a projection from %d"
                                  % (patches.shape[1], params.w_e.shape[0]))
    x = matmul(patches, params.w_e)
    x = add(x, index_select(params.pos, np.repeat(np.arange(n), c)))
    x = add(x, index_select(params.chan, np.tile(np.asarray(active_channels, dtype=np.int64), n)))
    return x


def embed(patches, params, active_channels):
    """
    Build the token grid: ``h_{i,j} = FFN(patch_{i,j} W_e + pos_i + chan_j)``; the CLS row is the CLS seed itself.
    """
    x = embed_pre_ffn(patches, params, active_channels)
    hidden = relu(add(matmul(x, params.ffn_w1), params.ffn_b1))
    h = add(matmul(hidden, params.ffn_w2), params.ffn_b2)
    return TokenGrid(params.n_patches, h, params.cls, active_channels)


def embed_concat(patches, params):
    """
    Token grid for the vanilla encoder: one token per spatial patch from the ``[N x (P^2*C)]`` concatenated patches.
    It is reported as a single channel.
    """
    patches = patches if isinstance(patches, Tensor) else Tensor(patches)
    if patches.shape != (params.pos.shape[0], params.w_e.shape[0]):
        raise ChMoEDimensionError("Concatenated patches %s do not fit a projection from %d over %d patches"
                                  % (patches.shape, params.w_e.shape[0], params.pos.shape[0]))
    x = add(matmul(patches, params.w_e), params.pos)
    return TokenGrid(params.pos.shape[0], x, params.cls, (0,))


def hcs_sample(channels, rng):
    """
    Hierarchical channel sampling: draw a count m uniformly from ``1..channels``, then a uniform m-subset.

    :returns:   The sampled channel ids, ascending.
    """
    if channels < 1:
        raise ChMoEConfigError("Cannot sample from %d channels" % channels)
    m = int(rng.integers(1, channels + 1))
    return tuple(sorted(int(x) for x in rng.choice(channels, size=m, replace=False)))
