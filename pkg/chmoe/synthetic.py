"""
Seeded synthetic multi-channel classification tasks.

Every image is Gaussian noise in all channels. In a signal task the channels listed in ``signal_channels`` also carry
a spatial template that depends on the class; the templates of different classes are orthogonal, so the classes are
separable from those channels alone. A ``uniform`` task carries no class signal at all.
"""

import logging
import dataclasses

import numpy as np

from .tokenizer import MultiChannelImage
from .rng import make_rng
from .errors import ChMoEConfigError

__all__ = ('SyntheticTask', 'Dataset', 'gen_synthetic', 'template_accuracy')

l = logging.getLogger(name=__name__)


@dataclasses.dataclass
class SyntheticTask:
    """
    :ivar int seed:             Seeds the class templates.
    :ivar int channels:         Channel count C.
    :ivar int num_classes:      Number of classes.
    :ivar tuple signal_channels: Channels carrying the class templates.
    :ivar int height:           Image height.
    :ivar int width:            Image width.
    :ivar float noise:          Standard deviation of the background noise.
    :ivar float amplitude:      Root-mean-square amplitude of each template.
    :ivar bool uniform:         No class signal anywhere.
    """
    seed: int = 0
    channels: int = 8
    num_classes: int = 4
    signal_channels: tuple = (1, 2)
    height: int = 32
    width: int = 32
    noise: float = 1.0
    amplitude: float = 1.0
    uniform: bool = False

    def __post_init__(self):
        self.signal_channels = tuple(int(c) for c in self.signal_channels)
        if self.channels < 1 or self.num_classes < 1:
            raise ChMoEConfigError("A task needs at least one channel and one class")
        if not self.uniform:
            if not self.signal_channels:
                raise ChMoEConfigError("A signal task needs at least one signal channel")
            for c in self.signal_channels:
                if not 0 <= c < self.channels:
                    raise ChMoEConfigError("Signal channel %d is outside 0..%d" % (c, self.channels - 1))
            if self.num_classes > self.height * self.width * len(self.signal_channels):
                raise ChMoEConfigError("Too many classes for %dx%d templates" % (self.height, self.width))
        self._templates = None

    @property
    def templates(self):
        """
        ``[classes x len(signal_channels) x H x W]`` class templates, pairwise orthogonal across classes.
        """
        if self._templates is None:
            self._templates = self._make_templates()
        return self._templates

    def _make_templates(self):
        rng = make_rng(self.seed, 'task')
        k = len(self.signal_channels)
        size = k * self.height * self.width
        raw = rng.normal(0.0, 1.0, (size, self.num_classes))
        q, _ = np.linalg.qr(raw)
        # unit-norm columns -> per-pixel RMS of `amplitude`
        t = q.T * (self.amplitude * np.sqrt(size))
        return t.reshape(self.num_classes, k, self.height, self.width)


class Dataset:
    """
    :ivar list images:  :class:`chmoe.tokenizer.MultiChannelImage` instances.
    :ivar labels:       Integer class per image.
    :vartype labels:    numpy.ndarray
    """

    __slots__ = ('images', 'labels')

    def __init__(self, images, labels):
        self.images = list(images)
        self.labels = np.asarray(labels, dtype=np.int64)

    def __len__(self):
        return len(self.images)

    def batch(self, indices):
        return [self.images[i] for i in indices], self.labels[np.asarray(indices, dtype=np.int64)]

    def class_counts(self, num_classes):
        return np.bincount(self.labels, minlength=num_classes)


def gen_synthetic(task, count, split_seed=0, stream='data'):
    """
    Generate `count` labelled images. Labels cycle through the classes and are shuffled, so class counts differ by at
    most one.

    :param SyntheticTask task:  The task.
    :param int count:           Number of images.
    :param int split_seed:      Distinguishes splits drawn from the same stream.
    :param str stream:          Random stream (``data`` for training sets, ``eval_data`` for held-out sets).
    :rtype:                     Dataset
    """
    if count < 0:
        raise ChMoEConfigError("Cannot generate %d images" % count)
    rng = make_rng(task.seed, stream, split_seed)
    labels = np.arange(count) % task.num_classes
    rng.shuffle(labels)
    shape = (task.channels, task.height, task.width)
    signal = list(task.signal_channels)
    images = []
    for y in labels:
        pixels = rng.normal(0.0, task.noise, shape)
        if not task.uniform:
            pixels[signal] += task.templates[y]
        images.append(MultiChannelImage(pixels))
    data = Dataset(images, labels)
    if task.uniform:
        l.debug("generated %d images (%s, split %d)", count, stream, split_seed)
    elif l.isEnabledFor(logging.DEBUG):
        l.debug("generated %d images (%s, split %d), template accuracy %.3f", count, stream, split_seed,
                template_accuracy(task, data))
    return data


def template_accuracy(task, dataset):
    """
    Accuracy of a matched filter that only looks at the signal channels: each image goes to the class whose template
    correlates best with it.
    """
    if len(dataset) == 0:
        return 1.0
    signal = list(task.signal_channels)
    flat = task.templates.reshape(task.num_classes, -1)
    x = np.stack([img.pixels[signal].reshape(-1) for img in dataset.images])
    return float(np.mean(np.argmax(x @ flat.T, axis=1) == dataset.labels))
