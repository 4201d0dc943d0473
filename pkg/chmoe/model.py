"""
The encoder: channel-wise tokenizer, a stack of pre-norm blocks whose attention is channel MoE (or one of the dense
baselines), and a linear classifier on the final CLS row.
"""

import logging
import dataclasses

import numpy as np

from .params import ParameterStore
from .tokenizer import (MultiChannelImage, EmbeddingParams, ConcatEmbeddingParams, patch_grid, patchify,
                        patchify_concat, embed, embed_concat)
from .attention import attention_kind, ALL_ATTENTION
from .attention.channel_moe import AGGREGATION_MODES
from .router import balance_loss, DEFAULT_BALANCE_WEIGHT
from .tensor import Tensor, matmul, add, relu, layer_norm, concat_rows, slice_rows, cross_entropy, scale
from .rng import make_rng
from .errors import ChMoEConfigError

__all__ = ('AttentionSpec', 'MoEViT', 'EncoderBlock', 'ForwardResult', 'accuracy', 'predict', 'LN_EPS')

l = logging.getLogger(name=__name__)

LN_EPS = 1e-6


@dataclasses.dataclass
class AttentionSpec:
    """
    Geometry and architecture of one encoder.

    :ivar int height:       Image height in pixels.
    :ivar int width:        Image width in pixels.
    :ivar int patch:        Patch side P; must divide height and width.
    :ivar int channels:     Channel count C (number of channel experts).
    :ivar int dim:          Token width D.
    :ivar int heads:        Attention heads; must divide D.
    :ivar int layers:       Encoder blocks L.
    :ivar int topk:         Experts per token, ``1 <= k <= C``.
    :ivar int num_classes:  Classifier outputs.
    :ivar str aggregation:  ``gate`` (gate-weighted) or ``uniform`` mixing of expert outputs.
    :ivar bool hcs:         Hierarchical channel sampling during training.
    :ivar str attention:    ``moe``, ``dense`` or ``vanilla``.
    :ivar int mlp_ratio:    Hidden width of the block MLP, in multiples of D.
    :ivar bool renormalize: Rescale Top-K gates to sum 1.
    """
    height: int = 32
    width: int = 32
    patch: int = 8
    channels: int = 8
    dim: int = 64
    heads: int = 4
    layers: int = 2
    topk: int = 2
    num_classes: int = 4
    aggregation: str = 'gate'
    hcs: bool = False
    attention: str = 'moe'
    mlp_ratio: int = 4
    renormalize: bool = False

    @property
    def n_patches(self):
        gh, gw = patch_grid(self.height, self.width, self.patch)
        return gh * gw

    def validate(self):
        for name in ('height', 'width', 'patch', 'channels', 'dim', 'heads', 'num_classes', 'mlp_ratio'):
            if getattr(self, name) < 1:
                raise ChMoEConfigError("%s must be positive, got %d" % (name, getattr(self, name)))
        if self.layers < 0:
            raise ChMoEConfigError("layers must not be negative, got %d" % self.layers)
        patch_grid(self.height, self.width, self.patch)
        if self.dim % self.heads:
            raise ChMoEConfigError("%d heads do not divide width %d" % (self.heads, self.dim))
        if not 1 <= self.topk <= self.channels:
            raise ChMoEConfigError("top-k %d is out of range for %d channels" % (self.topk, self.channels))
        if self.aggregation not in AGGREGATION_MODES:
            raise ChMoEConfigError("Unknown aggregation mode %r" % (self.aggregation,))
        attention_kind(self.attention)
        if self.hcs and self.attention == 'vanilla':
            raise ChMoEConfigError("Channel sampling needs channel-wise tokens; the vanilla encoder has none")
        return self

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


class ForwardResult:
    """
    :ivar logits:       ``[batch x classes]``.
    :vartype logits:    Tensor
    :ivar list routings: Per image, the routing table of every layer (empty for non-routing encoders).
    """

    __slots__ = ('logits', 'routings')

    def __init__(self, logits, routings):
        self.logits = logits
        self.routings = routings

    def layer_routings(self, layer):
        return [r[layer] for r in self.routings if r]


class EncoderBlock:
    """
    ``x <- x + Attn(LN(x)); x <- x + MLP(LN(x))`` over the patch tokens and the CLS row together.
    """

    def __init__(self, store, prefix, attn):
        self.prefix = prefix
        self.attn = attn
        self.norm1 = (store[prefix + '.norm1.gamma'], store[prefix + '.norm1.beta'])
        self.norm2 = (store[prefix + '.norm2.gamma'], store[prefix + '.norm2.beta'])
        self.mlp = tuple(store['%s.mlp.%s' % (prefix, k)] for k in ('w1', 'b1', 'w2', 'b2'))

    @staticmethod
    def init(store, rng, spec, prefix):
        d, hidden = spec.dim, spec.dim * spec.mlp_ratio
        for norm in ('norm1', 'norm2'):
            store.add('%s.%s.gamma' % (prefix, norm), np.ones(d))
            store.add('%s.%s.beta' % (prefix, norm), np.zeros(d))
        attn = attention_kind(spec.attention).init(store, rng, spec, prefix + '.attn')
        store.add(prefix + '.mlp.w1', rng.normal(0.0, 1.0 / np.sqrt(d), (d, hidden)))
        store.add(prefix + '.mlp.b1', np.zeros(hidden))
        store.add(prefix + '.mlp.w2', rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, d)))
        store.add(prefix + '.mlp.b2', np.zeros(d))
        return EncoderBlock(store, prefix, attn)

    def __call__(self, grid):
        n = grid.num_tokens
        x = concat_rows([grid.tokens, grid.cls])
        h = layer_norm(x, *self.norm1, eps=LN_EPS)
        attended, routing = self.attn(grid.with_tokens(slice_rows(h, 0, n), slice_rows(h, n, n + 1)))
        x = add(x, concat_rows([attended.tokens, attended.cls]))
        w1, b1, w2, b2 = self.mlp
        h = layer_norm(x, *self.norm2, eps=LN_EPS)
        x = add(x, add(matmul(relu(add(matmul(h, w1), b1)), w2), b2))
        return grid.with_tokens(slice_rows(x, 0, n), slice_rows(x, n, n + 1)), routing


class MoEViT:
    """
    A complete encoder and classifier over the parameters of a :class:`chmoe.params.ParameterStore`.

    :ivar spec:     The validated :class:`AttentionSpec`.
    :ivar store:    The parameters.
    :ivar list blocks: The :class:`EncoderBlock` stack.
    """

    def __init__(self, spec, store):
        self.spec = spec.validate()
        self.store = store
        if spec.attention == 'vanilla':
            self.embedding = ConcatEmbeddingParams.from_store(store)
        else:
            self.embedding = EmbeddingParams.from_store(store)
        kind = attention_kind(spec.attention)
        self.blocks = [EncoderBlock(store, 'blocks.%d' % i, kind.from_store(store, spec, 'blocks.%d.attn' % i))
                       for i in range(spec.layers)]
        self.norm = (store['norm.gamma'], store['norm.beta'])
        self.head = (store['head.weight'], store['head.bias'])

    @classmethod
    def init(cls, spec, seed):
        """
        Build a fresh model, drawing every initial value from the ``init`` stream of `seed`.
        """
        spec.validate()
        rng = make_rng(seed, 'init')
        store = ParameterStore()
        if spec.attention == 'vanilla':
            ConcatEmbeddingParams.init(store, rng, spec.patch, spec.n_patches, spec.channels, spec.dim)
        else:
            EmbeddingParams.init(store, rng, spec.patch, spec.n_patches, spec.channels, spec.dim)
        for i in range(spec.layers):
            EncoderBlock.init(store, rng, spec, 'blocks.%d' % i)
        store.add('norm.gamma', np.ones(spec.dim))
        store.add('norm.beta', np.zeros(spec.dim))
        store.add('head.weight', rng.normal(0.0, 1.0 / np.sqrt(spec.dim), (spec.dim, spec.num_classes)))
        store.add('head.bias', np.zeros(spec.num_classes))
        l.debug("initialized %s with %d parameter values", spec.attention, store.num_values())
        return cls(spec, store)

    @property
    def routes(self):
        return ALL_ATTENTION[self.spec.attention].routes

    def _check_image(self, image):
        s = self.spec
        if (image.channels, image.height, image.width) != (s.channels, s.height, s.width):
            raise ChMoEConfigError("Image is %dx%dx%d, the model expects %dx%dx%d"
                                   % (image.channels, image.height, image.width, s.channels, s.height, s.width))

    def tokenize(self, image, active_channels=None):
        """
        Embed one image. With `active_channels`, only those channels (original ids) are tokenized.
        """
        if not isinstance(image, MultiChannelImage):
            image = MultiChannelImage(image)
        self._check_image(image)
        if self.spec.attention == 'vanilla':
            return embed_concat(patchify_concat(image, self.spec.patch), self.embedding)
        if active_channels is None:
            active_channels = tuple(range(image.channels))
        sub = image.select_channels(active_channels)
        return embed(patchify(sub, self.spec.patch), self.embedding, active_channels)

    def encode(self, image, active_channels=None):
        """
        :returns:   ``(cls, routings)``: the final ``[1 x D]`` CLS row before the head norm, and one routing table per
                    layer (None entries for non-routing attention).
        """
        grid = self.tokenize(image, active_channels)
        routings = []
        for block in self.blocks:
            grid, routing = block(grid)
            routings.append(routing)
        return grid.cls, routings

    def classify(self, cls_rows):
        h = layer_norm(cls_rows, *self.norm, eps=LN_EPS)
        return add(matmul(h, self.head[0]), self.head[1])

    def forward(self, images, active_channels=None):
        """
        :param images:          A sequence of :class:`MultiChannelImage` (or ``C x H x W`` arrays).
        :param active_channels: None, or one channel-id tuple per image.
        :rtype:                 ForwardResult
        """
        if len(images) == 0:
            raise ChMoEConfigError("Cannot run a forward pass over an empty batch")
        cls_rows, routings = [], []
        for n, image in enumerate(images):
            cls, r = self.encode(image, None if active_channels is None else active_channels[n])
            cls_rows.append(cls)
            routings.append([x for x in r if x is not None])
        return ForwardResult(self.classify(concat_rows(cls_rows)), routings)

    __call__ = forward

    def balance(self, result, w_importance=DEFAULT_BALANCE_WEIGHT, w_load=DEFAULT_BALANCE_WEIGHT):
        """
        Balance loss summed over layers, averaged over the images of a forward pass. None for non-routing encoders.
        """
        terms = [balance_loss(r.probs, r.k, w_importance, w_load) for per_image in result.routings for r in per_image]
        if not terms:
            return None
        total = terms[0]
        for t in terms[1:]:
            total = add(total, t)
        return scale(total, 1.0 / len(result.routings))

    def loss(self, images, labels, active_channels=None, w_importance=DEFAULT_BALANCE_WEIGHT,
             w_load=DEFAULT_BALANCE_WEIGHT):
        """
        :returns:   ``(total, ce, balance, result)``; `balance` is a zero constant for non-routing encoders.
        """
        result = self.forward(images, active_channels)
        ce = cross_entropy(result.logits, labels)
        bal = self.balance(result, w_importance, w_load)
        if bal is None:
            bal = Tensor(0.0)
        return add(ce, bal), ce, bal, result

    def __repr__(self):
        return "<MoEViT %s, L=%d, D=%d, C=%d, k=%d>" % (self.spec.attention, self.spec.layers, self.spec.dim,
                                                        self.spec.channels, self.spec.topk)


def predict(logits):
    """
    Arg-max class per row; ties go to the lower class index.
    """
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(data, axis=1)


def accuracy(logits, labels):
    """
    Fraction of rows whose :func:`predict` equals the label.
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ChMoEConfigError("Accuracy of an empty dataset is undefined")
    return float(np.mean(predict(logits) == labels))
