"""
Training harness: decoupled-weight-decay Adam with cosine decay, periodic evaluation, checkpoints that resume
bit-identically.

A checkpoint is a directory::

    manifest.txt        name path shape, one line per tensor
    tensors/*.mct       parameters and optimizer moments (``opt.m.*``, ``opt.v.*``), MCT1 each
    config.cfg          the RunConfig, canonical form
    state.txt           step counters and random generator states
    metrics.csv         metrics recorded so far
"""

import os
import json
import math
import logging
import collections

import numpy as np

from .config import RunConfig
from .model import MoEViT, accuracy, predict
from .params import ParameterStore, write_manifest, read_manifest
from .synthetic import gen_synthetic
from .tokenizer import hcs_sample
from .tensor import backward
from .rng import make_rng, rng_state, set_rng_state
from .utils import format_float
from .errors import ChMoETrainingError, ChMoEFormatError

__all__ = (
    'AdamW', 'cosine_lr', 'TrainState', 'MetricsRow', 'METRICS_HEADER', 'train', 'evaluate', 'save_checkpoint',
    'load_checkpoint', 'write_metrics', 'load_model',
)

l = logging.getLogger(name=__name__)

METRICS_HEADER = 'step,loss,ce_loss,balance_loss,train_acc,eval_acc'

MetricsRow = collections.namedtuple('MetricsRow', 'step loss ce_loss balance_loss train_acc eval_acc')


def _format_row(row):
    return '%d,%s' % (row.step, ','.join(format_float(x) for x in row[1:]))


def write_metrics(rows, target):
    """
    Write metric rows as CSV to a path or a text stream.
    """
    text = METRICS_HEADER + '\n' + ''.join(_format_row(r) + '\n' for r in rows)
    if hasattr(target, 'write'):
        target.write(text)
    else:
        with open(target, 'w') as f:
            f.write(text)


def _read_metrics(path):
    rows = []
    with open(path, 'r') as f:
        header = f.readline().strip()
        if header != METRICS_HEADER:
            raise ChMoEFormatError("%s: unexpected metrics header %r" % (path, header))
        for line in f:
            parts = line.strip().split(',')
            if len(parts) != 6:
                continue
            rows.append(MetricsRow(int(parts[0]), *[float(x) for x in parts[1:]]))
    return rows


def cosine_lr(step, total, lr, min_lr=0.0):
    """
    Cosine decay from `lr` at step 0 to `min_lr` at step `total`.
    """
    if total <= 0:
        return lr
    return min_lr + 0.5 * (lr - min_lr) * (1.0 + math.cos(math.pi * min(step, total) / total))


class AdamW:
    """
    Adam with bias-corrected moments and decoupled weight decay (scaled by the learning rate, applied to matrices
    only). Parameters without a gradient in a step are left untouched, moments included.

    :ivar dict m:   First moments by parameter name.
    :ivar dict v:   Second moments by parameter name.
    :ivar int t:    Number of updates applied.
    """

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.05):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, store, lr):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in store.items():
            g = p.grad
            if g is None:
                continue
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros(p.shape)
                self.v[name] = np.zeros(p.shape)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and p.ndim >= 2:
                update = update + self.weight_decay * p.data
            p.data -= lr * update

    def tensors(self):
        out = {}
        for name in self.m:
            out['opt.m.' + name] = self.m[name]
            out['opt.v.' + name] = self.v[name]
        return out

    def load_tensors(self, tensors, t):
        self.m, self.v = {}, {}
        for key, value in tensors.items():
            arr = value.data.copy()
            if key.startswith('opt.m.'):
                self.m[key[6:]] = arr
            elif key.startswith('opt.v.'):
                self.v[key[6:]] = arr
        self.t = t


class TrainState:
    """
    Everything needed to continue a run.

    :ivar model:        The :class:`chmoe.model.MoEViT`.
    :ivar optimizer:    The :class:`AdamW`.
    :ivar int step:     Completed steps.
    :ivar batch_rng:    Generator drawing mini-batches.
    :ivar hcs_rng:      Generator drawing channel subsets.
    :ivar list history: :class:`MetricsRow` records so far.
    """

    def __init__(self, model, optimizer, step, batch_rng, hcs_rng, history=None):
        self.model = model
        self.optimizer = optimizer
        self.step = step
        self.batch_rng = batch_rng
        self.hcs_rng = hcs_rng
        self.history = history if history is not None else []

    @property
    def store(self):
        return self.model.store

    @classmethod
    def fresh(cls, config):
        model = MoEViT.init(config.spec(), config.seed)
        opt = AdamW(config.beta1, config.beta2, config.adam_eps, config.weight_decay)
        return cls(model, opt, 0, make_rng(config.seed, 'batches'), make_rng(config.seed, 'hcs'))

    def __repr__(self):
        return "<TrainState step %d>" % self.step


def save_checkpoint(directory, state, config):
    tensors = dict(state.store.items())
    tensors.update(state.optimizer.tensors())
    write_manifest(directory, tensors)
    with open(os.path.join(directory, 'config.cfg'), 'w') as f:
        f.write(config.dump())
    with open(os.path.join(directory, 'state.txt'), 'w') as f:
        f.write('step = %d\n' % state.step)
        f.write('opt_step = %d\n' % state.optimizer.t)
        f.write('rng.batches = %s\n' % json.dumps(rng_state(state.batch_rng), sort_keys=True))
        f.write('rng.hcs = %s\n' % json.dumps(rng_state(state.hcs_rng), sort_keys=True))
    write_metrics(state.history, os.path.join(directory, 'metrics.csv'))
    l.info("saved checkpoint at step %d to %s", state.step, directory)


def _read_state(path):
    if not os.path.isfile(path):
        raise FileNotFoundError("No checkpoint state at %s" % path)
    out = {}
    with open(path, 'r') as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            if '=' not in line:
                raise ChMoEFormatError("%s:%d: expected key = value" % (path, lineno))
            key, value = line.split('=', 1)
            out[key.strip()] = value.strip()
    try:
        return int(out['step']), int(out['opt_step']), json.loads(out['rng.batches']), json.loads(out['rng.hcs'])
    except (KeyError, ValueError) as e:
        raise ChMoEFormatError("%s: incomplete checkpoint state (%s)" % (path, e))


def load_model(directory):
    """
    Load only the model of a checkpoint.

    :returns:   ``(config, model, tensors)``; `tensors` is every tensor the manifest lists.
    """
    cfg_path = os.path.join(directory, 'config.cfg')
    if not os.path.isfile(cfg_path):
        raise FileNotFoundError("No checkpoint config at %s" % cfg_path)
    with open(cfg_path, 'r') as f:
        config = RunConfig.parse(f.read(), source=cfg_path)
    tensors = read_manifest(directory)
    store = ParameterStore()
    for name, t in tensors.items():
        if not name.startswith('opt.'):
            store.add(name, t.data)
    try:
        model = MoEViT(config.spec(), store)
    except KeyError as e:
        raise ChMoEFormatError("Checkpoint %s is missing a parameter: %s" % (directory, e))
    return config, model, tensors


def load_checkpoint(directory):
    """
    :returns:   ``(config, state)`` ready to continue training.
    """
    config, model, tensors = load_model(directory)
    step, opt_step, batch_state, hcs_state = _read_state(os.path.join(directory, 'state.txt'))
    opt = AdamW(config.beta1, config.beta2, config.adam_eps, config.weight_decay)
    opt.load_tensors({k: v for k, v in tensors.items() if k.startswith('opt.')}, opt_step)
    batch_rng = make_rng(config.seed, 'batches')
    set_rng_state(batch_rng, batch_state)
    hcs_rng = make_rng(config.seed, 'hcs')
    set_rng_state(hcs_rng, hcs_state)
    metrics = os.path.join(directory, 'metrics.csv')
    history = _read_metrics(metrics) if os.path.isfile(metrics) else []
    return config, TrainState(model, opt, step, batch_rng, hcs_rng, history)


def evaluate(model, dataset, batch_size=64):
    """
    Top-1 accuracy of `model` on `dataset`, every channel present.
    """
    if len(dataset) == 0:
        raise ChMoETrainingError("Cannot evaluate on an empty dataset")
    preds = []
    for start in range(0, len(dataset), batch_size):
        images, _ = dataset.batch(range(start, min(start + batch_size, len(dataset))))
        preds.append(predict(model.forward(images).logits))
    return float(np.mean(np.concatenate(preds) == dataset.labels))


def _monitor(model, dataset, config):
    """
    Loss terms and accuracy on the fixed first mini-batch of the training set.
    """
    images, labels = dataset.batch(range(min(config.batch_size, len(dataset))))
    total, ce, bal, result = model.loss(images, labels, None, config.w_importance, config.w_load)
    return total.item(), ce.item(), bal.item(), accuracy(result.logits, labels)


def train(config, state=None, checkpoint_dir=None, metrics_out=None, datasets=None):
    """
    Run (or continue) training up to ``config.steps``.

    The loss minimized is cross-entropy plus the balance loss. Every ``eval_interval`` steps, and after the last step,
    a :class:`MetricsRow` is recorded: loss terms and accuracy on the first training mini-batch, then accuracy on the
    held-out set.

    :param RunConfig config:    The run.
    :param TrainState state:    Continue from this state instead of a fresh model.
    :param checkpoint_dir:      Write the final state here.
    :param metrics_out:         Path or text stream receiving the metrics CSV at the end.
    :param datasets:            Optional ``(train, eval)`` datasets; generated from the config when omitted.
    :raises ChMoETrainingError: If the loss stops being finite.
    :rtype:                     TrainState
    """
    config.validate()
    if datasets is None:
        task = config.task()
        datasets = (gen_synthetic(task, config.train_size, 0, 'data'),
                    gen_synthetic(task, config.eval_size, 0, 'eval_data'))
    train_set, eval_set = datasets
    if len(train_set) == 0 and config.steps > (state.step if state else 0):
        raise ChMoETrainingError("Cannot train on an empty dataset", step=0)
    if state is None:
        state = TrainState.fresh(config)
    model, opt = state.model, state.optimizer
    spec = model.spec
    batch_size = min(config.batch_size, len(train_set))

    while state.step < config.steps:
        step = state.step
        idx = np.sort(state.batch_rng.choice(len(train_set), size=batch_size, replace=False))
        images, labels = train_set.batch(idx)
        active = [hcs_sample(spec.channels, state.hcs_rng) for _ in images] if spec.hcs else None

        model.store.zero_grads()
        total, _, _, _ = model.loss(images, labels, active, config.w_importance, config.w_load)
        value = total.item()
        if not math.isfinite(value):
            raise ChMoETrainingError("Loss became %r at step %d" % (value, step), step=step)
        backward(total)
        opt.step(model.store, cosine_lr(step, config.steps, config.lr, config.min_lr))
        state.step = step + 1

        if state.step % config.eval_interval == 0 or state.step == config.steps:
            loss, ce, bal, train_acc = _monitor(model, train_set, config)
            if not math.isfinite(loss):
                raise ChMoETrainingError("Loss became %r at step %d" % (loss, state.step), step=state.step)
            eval_acc = evaluate(model, eval_set) if len(eval_set) else float('nan')
            row = MetricsRow(state.step, loss, ce, bal, train_acc, eval_acc)
            state.history.append(row)
            l.info("step %d: loss %.4f (ce %.4f, balance %.4f), train acc %.3f, eval acc %.3f", *row)

    model.store.zero_grads()
    if checkpoint_dir is not None:
        save_checkpoint(checkpoint_dir, state, config)
    if metrics_out is not None:
        write_metrics(state.history, metrics_out)
    return state
