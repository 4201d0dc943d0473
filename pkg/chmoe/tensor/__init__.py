"""
A minimal dense tensor with reverse-mode gradients, sized to express channel-routed attention and to train a small
encoder on the CPU. Everything is 64-bit.
"""

# pylint: disable=wildcard-import
from .tensor import *
from .ops import *
from .instrument import *
from .serialize import *
from .gradcheck import *
