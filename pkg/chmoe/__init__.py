"""
chmoe builds vision encoders for images with arbitrary channel counts in which attention is a mixture of channel
experts: every patch token is routed to a few channels and attends only to their tokens.

The main entry points are :class:`MoEViT` (the encoder), :func:`route` and :func:`channel_moe` (the block itself),
:mod:`chmoe.cost_model` (closed-form attention cost) and the ``chmoe`` command.
"""

__version__ = (0, 3, 0)

import logging
logging.getLogger(name=__name__).addHandler(logging.NullHandler())

# pylint: disable=wildcard-import
from . import tensor
from . import utils
from .errors import *
from .rng import *
from .params import *
from .tokenizer import *
from .router import *
from .attention import (AttentionParams, AttentionModule, ALL_ATTENTION, register_attention, ChannelMoEAttention,
                        DenseAttention, VanillaAttention, ChannelBatches, build_batches, cross_attend, aggregate,
                        channel_moe, dense_channelwise_attention, vanilla_attention, naive_oracle)
from .model import *
from .synthetic import *
from .config import *
from .cost_model import *
from .training import *
