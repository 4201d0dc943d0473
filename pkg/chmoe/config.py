"""
Run configuration: every model and training knob, loadable from a plain ``key=value`` file.

::

    # desk-scale run
    channels = 8
    topk = 2
    lr = 1e-3
    signal_channels = 1,2
"""

import os
import logging
import dataclasses

from .model import AttentionSpec
from .synthetic import SyntheticTask
from .errors import ChMoEConfigError

__all__ = ('RunConfig', 'load_config', 'parse_override')

l = logging.getLogger(name=__name__)

# accepted for older config files, rewritten to the current key
DEPRECATED_KEYS = {
    'k': 'topk',
    'num_heads': 'heads',
    'batch': 'batch_size',
}

_TRUE = ('true', '1', 'yes', 'on')
_FALSE = ('false', '0', 'no', 'off')


@dataclasses.dataclass
class RunConfig:
    """
    Everything a training run needs. Model fields mirror :class:`chmoe.model.AttentionSpec`; task fields mirror
    :class:`chmoe.synthetic.SyntheticTask` (the task seed is the run seed).
    """
    # model
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
    # task
    signal_channels: tuple = (1, 2)
    noise: float = 1.0
    amplitude: float = 1.0
    uniform: bool = False
    train_size: int = 512
    eval_size: int = 256
    # optimization
    seed: int = 0
    steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-3
    min_lr: float = 0.0
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    w_importance: float = 0.01
    w_load: float = 0.01
    eval_interval: int = 100

    def __post_init__(self):
        self.signal_channels = tuple(int(c) for c in self.signal_channels)

    @classmethod
    def field_types(cls):
        return {f.name: f.type for f in dataclasses.fields(cls)}

    def set(self, key, value, where=None):
        """
        Assign a textual value to a field, coercing it to the field's type.

        :param str where:   Location for error messages, e.g. ``run.cfg:3``.
        """
        prefix = '%s: ' % where if where else ''
        if key in DEPRECATED_KEYS:
            l.warning("%sconfig key %r is deprecated, use %r", prefix, key, DEPRECATED_KEYS[key])
            key = DEPRECATED_KEYS[key]
        types = self.field_types()
        if key not in types:
            raise ChMoEConfigError("%sunknown config key %r" % (prefix, key))
        try:
            coerced = _coerce(types[key], value.strip())
        except ValueError:
            raise ChMoEConfigError("%sinvalid value %r for %s (%s)" % (prefix, value, key, types[key].__name__))
        setattr(self, key, coerced)

    @classmethod
    def parse(cls, text, source='<string>', overrides=()):
        """
        Build a config from file text, then apply ``key=value`` overrides, which win.
        """
        cfg = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split('#', 1)[0].strip()
            if not line:
                continue
            if '=' not in line:
                raise ChMoEConfigError("%s:%d: expected key=value, got %r" % (source, lineno, line))
            key, value = line.split('=', 1)
            cfg.set(key.strip(), value, '%s:%d' % (source, lineno))
        for item in overrides:
            key, value = parse_override(item)
            cfg.set(key, value, '--set %s' % key)
        return cfg

    def dump(self):
        """
        Canonical text form: one ``key = value`` line per field, keys sorted.
        """
        out = []
        for key in sorted(self.field_types()):
            out.append('%s = %s\n' % (key, _render(getattr(self, key))))
        return ''.join(out)

    def spec(self):
        names = {f.name for f in dataclasses.fields(AttentionSpec)}
        return AttentionSpec(**{k: getattr(self, k) for k in names}).validate()

    def task(self):
        return SyntheticTask(seed=self.seed, channels=self.channels, num_classes=self.num_classes,
                             signal_channels=self.signal_channels, height=self.height, width=self.width,
                             noise=self.noise, amplitude=self.amplitude, uniform=self.uniform)

    def validate(self):
        self.spec()
        for key in ('steps', 'train_size', 'eval_size'):
            if getattr(self, key) < 0:
                raise ChMoEConfigError("%s must not be negative" % key)
        for key in ('batch_size', 'eval_interval'):
            if getattr(self, key) < 1:
                raise ChMoEConfigError("%s must be positive" % key)
        if self.lr < 0 or self.min_lr < 0:
            raise ChMoEConfigError("Learning rates must not be negative")
        if self.train_size and self.batch_size > self.train_size:
            raise ChMoEConfigError("batch_size %d exceeds train_size %d" % (self.batch_size, self.train_size))
        return self


def parse_override(item):
    if '=' not in item:
        raise ChMoEConfigError("Override %r is not key=value" % item)
    key, value = item.split('=', 1)
    return key.strip(), value


def _coerce(typ, value):
    if typ is bool:
        low = value.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(value)
    if typ is tuple:
        return tuple(int(x) for x in value.split(',') if x.strip())
    if typ is int:
        try:
            return int(value, 0)
        except ValueError:
            # leading-zero decimals such as 08
            return int(value)
    if typ is float:
        return float(value)
    return value


def _render(value):
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, tuple):
        return ','.join(str(x) for x in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def load_config(path=None, overrides=()):
    """
    Read a config file (or start from defaults when `path` is None) and apply overrides.
    """
    if path is None:
        return RunConfig.parse('', overrides=overrides)
    if not os.path.isfile(path):
        raise FileNotFoundError("Config file %s does not exist" % path)
    with open(path, 'r') as f:
        return RunConfig.parse(f.read(), source=path, overrides=overrides)
