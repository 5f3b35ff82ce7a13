# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#    http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or
# implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Optimizer, training loop and checkpoints.

A checkpoint is a directory::

    manifest.json   format, config, classes, epoch, seed state, digests of
                    the other two files and the name/shape/offset/frozen
                    record of every tensor
    weights.bin     all tensors as little-endian float32, concatenated in
                    manifest order
    history.json    per-epoch losses and accuracies

Files are written atomically and the manifest goes last. Rewriting an
existing checkpoint can still be interrupted between files, so loading
checks the digests and refuses a manifest from another save.
"""

import dataclasses
import hashlib
import json
import logging
import math
import os
import typing

import numpy as np

from ewastenet.common import exceptions
from ewastenet.common.i18n import _
from ewastenet.common import utils
from ewastenet import functional as F
from ewastenet import model as ewaste_model
from ewastenet import tensor


LOG = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 'ewastenet-checkpoint'
CHECKPOINT_VERSION = 1
BLOB_DTYPE = '<f4'
MANIFEST = 'manifest.json'
WEIGHTS = 'weights.bin'
HISTORY = 'history.json'
FINAL = 'final'
BEST = 'best'


@dataclasses.dataclass
class TrainConfig:
    """Optimization settings.

    ``seed`` None means "resolve from the environment", see
    :py:func:`ewastenet.common.utils.resolve_seed`.
    """
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: typing.Optional[int] = None
    freeze_backbones: bool = False
    augment: bool = True

    def validate(self):
        violations = []
        for name in ('epochs', 'batch_size'):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) \
                    or value < 1:
                violations.append(_('%s must be at least 1') % name)
        if not self.learning_rate > 0:
            violations.append(_('learning_rate must be positive'))
        for name in ('beta1', 'beta2'):
            if not 0 <= getattr(self, name) < 1:
                violations.append(_('%s must be in [0, 1)') % name)
        if not self.adam_eps > 0:
            violations.append(_('adam_eps must be positive'))
        if violations:
            raise exceptions.ConfigError(violations)
        if self.seed is not None:
            utils.validate_seed(self.seed)
        return self

    @property
    def betas(self):
        return (self.beta1, self.beta2)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data, section='train'):
        data = utils.check_keys(data, [f.name for f in dataclasses.fields(
            cls)], section)
        return cls(**data)


@dataclasses.dataclass
class AdamState:
    """Moment estimates and step counter of :py:func:`adam_step`."""
    step: int = 0
    m: dict = dataclasses.field(default_factory=dict)
    v: dict = dataclasses.field(default_factory=dict)


def adam_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8):
    """Apply one bias-corrected Adam update in place.

    :param params: :py:class:`ewastenet.parameters.ModelParameters`.
    :param grads: mapping of parameter name to gradient array, names
        without a gradient are left alone.
    :param state: :py:class:`AdamState`, updated in place.
    :returns: state.
    """
    beta1, beta2 = betas
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for name, grad in grads.items():
        if grad is None or params.is_frozen(name):
            continue
        t = params[name]
        if grad.shape != t.shape:
            raise exceptions.ShapeError(
                _('Gradient of %s does not match the parameter') % name,
                grad.shape, t.shape)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(t.data)
            v = np.zeros_like(t.data)
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * (grad * grad)
        state.m[name], state.v[name] = m, v
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
        t.data -= update.astype(t.data.dtype)
    return state


class Adam(object):
    """Adam over the trainable tensors of a parameter collection."""

    def __init__(self, params, learning_rate=1e-3, betas=(0.9, 0.999),
                 eps=1e-8):
        self.params = params
        self.learning_rate = learning_rate
        self.betas = tuple(betas)
        self.eps = eps
        self.state = AdamState()

    def step(self):
        grads = {name: t.grad for name, t in self.params.trainable()}
        adam_step(self.params, grads, self.state, self.learning_rate,
                  self.betas, self.eps)

    def zero_grad(self):
        self.params.zero_grad()


@dataclasses.dataclass
class EpochMetrics:
    loss: float
    accuracy: float


@dataclasses.dataclass
class EvaluationResult:
    """Predictions of a model on one split.

    :ivar labels: true labels, in dataset order.
    :ivar predictions: argmax of the probabilities.
    :ivar probabilities: N x C softmax outputs.
    """
    loss: float
    accuracy: float
    labels: np.ndarray
    predictions: np.ndarray
    probabilities: np.ndarray


def train_step(model, images, labels, optimizer, training=True, rng=None):
    """One forward/backward/update step.

    :returns: (loss, number of correct predictions).
    :raises: FloatingPointError if the loss is not finite.
    """
    optimizer.zero_grad()
    logits = model.logits(images, training=training, rng=rng)
    loss = F.cross_entropy(logits, labels)
    value = loss.item()
    if not math.isfinite(value):
        raise FloatingPointError(_('Loss became %s') % value)
    tensor.backward(loss)
    optimizer.step()
    correct = int(np.sum(logits.data.argmax(axis=1) == labels))
    return value, correct


def train_epoch(model, dataset, cfg, optimizer, epoch=0, seed=0):
    """Run one pass over the training split.

    Batches are shuffled by the dataset, dropout masks come from the
    ``(seed, DROPOUT_STREAM, epoch)`` generator.

    :returns: :py:class:`EpochMetrics` with sample-weighted means.
    :raises: DatasetError for an empty split.
    """
    if not len(dataset):
        raise exceptions.DatasetError(_('Training split is empty'))
    rng = utils.derive_rng(seed, utils.DROPOUT_STREAM, epoch)
    total_loss, correct = 0.0, 0
    for step, (images, labels, _indices) in enumerate(dataset.batches(
            cfg.batch_size, epoch=epoch, shuffle=True, augment=cfg.augment)):
        loss, hits = train_step(model, images, labels, optimizer, rng=rng)
        LOG.debug('Epoch %(epoch)d step %(step)d: loss %(loss).6f',
                  {'epoch': epoch, 'step': step, 'loss': loss})
        total_loss += loss * len(labels)
        correct += hits
    return EpochMetrics(loss=total_loss / len(dataset),
                        accuracy=correct / len(dataset))


def evaluate_split(model, dataset, batch_size=16):
    """Inference over a split in dataset order, without dropout.

    :returns: :py:class:`EvaluationResult`.
    :raises: DatasetError for an empty split.
    """
    if not len(dataset):
        raise exceptions.DatasetError(_('Cannot evaluate an empty split'))
    probabilities, labels, total_loss = [], [], 0.0
    with tensor.no_grad():
        for images, batch_labels, _indices in dataset.batches(batch_size):
            logits = model.logits(images)
            total_loss += F.cross_entropy(logits,
                                          batch_labels).item() * len(
                                              batch_labels)
            probabilities.append(F.softmax(logits, axis=-1).numpy())
            labels.append(batch_labels)
    probabilities = np.concatenate(probabilities)
    labels = np.concatenate(labels)
    predictions = probabilities.argmax(axis=1)
    return EvaluationResult(loss=total_loss / len(labels),
                            accuracy=float(np.mean(predictions == labels)),
                            labels=labels, predictions=predictions,
                            probabilities=probabilities)


@dataclasses.dataclass
class History:
    """Per-epoch training record; validation entries are None without a
    validation split.
    """
    train_loss: list = dataclasses.field(default_factory=list)
    train_accuracy: list = dataclasses.field(default_factory=list)
    val_loss: list = dataclasses.field(default_factory=list)
    val_accuracy: list = dataclasses.field(default_factory=list)

    def __len__(self):
        return len(self.train_loss)

    def append(self, train, val=None):
        self.train_loss.append(train.loss)
        self.train_accuracy.append(train.accuracy)
        self.val_loss.append(None if val is None else val.loss)
        self.val_accuracy.append(None if val is None else val.accuracy)

    @property
    def best_epoch(self):
        """1-based epoch with the best validation accuracy.

        Ties go to the earliest epoch. Falls back to training accuracy
        when there is no validation split.
        """
        if not len(self):
            return None
        scores = self.val_accuracy
        if any(score is None for score in scores):
            scores = self.train_accuracy
        return int(np.argmax(scores)) + 1

    def to_dict(self):
        result = dataclasses.asdict(self)
        result['best_epoch'] = self.best_epoch
        return result

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data.pop('best_epoch', None)
        return cls(**utils.check_keys(
            data, [f.name for f in dataclasses.fields(cls)], 'history'))


@dataclasses.dataclass
class FitResult:
    model: object
    history: History
    seed: int


def fit(model, train_set, val_set, cfg, out_dir=None, classes=(),
        callback=None):
    """Train for ``cfg.epochs`` epochs.

    After each epoch the validation split is evaluated and, with out_dir,
    ``final/`` is rewritten and ``best/`` replaced whenever the validation
    accuracy strictly improves.

    :param val_set: dataset or None.
    :param classes: class names stored in checkpoints.
    :param callback: called with (epoch, train metrics, validation result
        or None) after every epoch.
    :returns: :py:class:`FitResult`.
    """
    cfg.validate()
    seed = utils.resolve_seed(cfg.seed)
    if cfg.freeze_backbones:
        ewaste_model.freeze_backbones(model.params)
    trainable, frozen = model.count_trainable_parameters()
    LOG.info('Training %(trainable)d parameters (%(frozen)d frozen) for '
             '%(epochs)d epochs with seed %(seed)d',
             {'trainable': trainable, 'frozen': frozen,
              'epochs': cfg.epochs, 'seed': seed})
    optimizer = Adam(model.params, cfg.learning_rate, cfg.betas,
                     cfg.adam_eps)
    history = History()
    for epoch in range(1, cfg.epochs + 1):
        train = train_epoch(model, train_set, cfg, optimizer, epoch=epoch,
                            seed=seed)
        val = None
        if val_set is not None and len(val_set):
            val = evaluate_split(model, val_set, cfg.batch_size)
        history.append(train, val)
        LOG.info('Epoch %(epoch)d/%(epochs)d: loss %(loss).4f, accuracy '
                 '%(acc).4f, validation accuracy %(val)s',
                 {'epoch': epoch, 'epochs': cfg.epochs, 'loss': train.loss,
                  'acc': train.accuracy,
                  'val': 'n/a' if val is None else '%.4f' % val.accuracy})
        if out_dir is not None:
            save_checkpoint(os.path.join(out_dir, FINAL), model, epoch=epoch,
                            classes=classes, seed=seed, history=history)
            if history.best_epoch == epoch:
                save_checkpoint(os.path.join(out_dir, BEST), model,
                                epoch=epoch, classes=classes, seed=seed,
                                history=history)
            utils.atomic_write(os.path.join(out_dir, HISTORY),
                               utils.dump_json(history.to_dict()))
        if callback is not None:
            callback(epoch, train, val)
    return FitResult(model=model, history=history, seed=seed)


# Checkpoints


@dataclasses.dataclass
class Checkpoint:
    """A loaded checkpoint.

    :ivar model: :py:class:`ewastenet.model.EWasteNet` with the stored
        parameters and frozen flags.
    :ivar seed: seed of the run that wrote the checkpoint.
    """
    model: object
    classes: tuple
    epoch: int
    seed: int
    history: typing.Optional[History] = None


def save_checkpoint(path, model, epoch=0, classes=(), seed=0, history=None):
    """Write model parameters and metadata to the directory path.

    The manifest is written last and records SHA-256 digests of the
    weights and history files, so a save interrupted before it finishes
    is rejected on load instead of pairing new weights with old metadata.
    """
    tensors, chunks, offset = [], [], 0
    for name, t in model.params.items():
        data = np.ascontiguousarray(t.data, dtype=BLOB_DTYPE)
        tensors.append({'name': name, 'shape': list(t.shape),
                        'offset': offset,
                        'frozen': model.params.is_frozen(name)})
        chunks.append(data.tobytes())
        offset += data.nbytes
    blob = b''.join(chunks)
    history_text = utils.dump_json((history or History()).to_dict())
    manifest = {
        'format': CHECKPOINT_FORMAT,
        'version': CHECKPOINT_VERSION,
        'dtype': BLOB_DTYPE,
        'config': model.cfg.to_dict(),
        'classes': list(classes),
        'epoch': epoch,
        'rng_state': {'seed': seed, 'epoch': epoch},
        'blob_size': offset,
        'weights_sha256': hashlib.sha256(blob).hexdigest(),
        'history_sha256': hashlib.sha256(
            history_text.encode('utf-8')).hexdigest(),
        'tensors': tensors,
    }
    os.makedirs(path, exist_ok=True)
    utils.atomic_write(os.path.join(path, WEIGHTS), blob)
    utils.atomic_write(os.path.join(path, HISTORY), history_text)
    utils.atomic_write(os.path.join(path, MANIFEST), utils.dump_json(
        manifest))
    LOG.debug('Saved checkpoint of epoch %(epoch)d to %(path)s',
              {'epoch': epoch, 'path': path})


def _read_manifest(path):
    manifest_path = os.path.join(path, MANIFEST)
    if not os.path.isfile(manifest_path):
        raise exceptions.CheckpointNotFound(path)
    try:
        with open(manifest_path, 'r', encoding='utf-8') as fp:
            manifest = json.load(fp)
    except ValueError as exc:
        raise exceptions.CheckpointError(
            _('Checkpoint manifest %(path)s is not valid JSON: %(err)s') %
            {'path': manifest_path, 'err': exc})
    if not isinstance(manifest, dict) or \
            manifest.get('format') != CHECKPOINT_FORMAT:
        raise exceptions.CheckpointError(
            _('%s is not an ewastenet checkpoint manifest') % manifest_path)
    if manifest.get('version') != CHECKPOINT_VERSION:
        raise exceptions.CheckpointError(
            _('Unsupported checkpoint version %(found)s, expected '
              '%(expected)d') % {'found': manifest.get('version'),
                                 'expected': CHECKPOINT_VERSION})
    return manifest


def _verify_digest(manifest, key, content, name):
    if manifest.get(key) != hashlib.sha256(content).hexdigest():
        raise exceptions.CheckpointError(
            _('%(name)s does not match the digest in the manifest, the '
              'checkpoint was not written completely') % {'name': name})


def load_checkpoint(path, cfg=None):
    """Read a checkpoint written by :py:func:`save_checkpoint`.

    :param cfg: expected :py:class:`ewastenet.model.EWasteNetConfig`, None
        accepts the stored one.
    :returns: :py:class:`Checkpoint`.
    :raises: CheckpointNotFound if there is no manifest at path.
    :raises: CheckpointError if the manifest, the blob and the
        configuration disagree.
    """
    manifest = _read_manifest(path)
    try:
        stored = ewaste_model.EWasteNetConfig.from_dict(
            manifest.get('config'))
        stored.validate()
    except exceptions.ConfigError as exc:
        raise exceptions.CheckpointError(
            _('Checkpoint configuration is invalid: %s') % exc)
    if cfg is not None and cfg != stored:
        raise exceptions.CheckpointError(
            _('Checkpoint configuration differs from the requested one'))

    try:
        with open(os.path.join(path, WEIGHTS), 'rb') as fp:
            blob = fp.read()
    except FileNotFoundError:
        raise exceptions.CheckpointError(
            _('Checkpoint %s has no weights file') % path)
    if len(blob) != manifest.get('blob_size'):
        raise exceptions.CheckpointError(
            _('Weights file has %(real)d bytes, the manifest expects '
              '%(expected)s') % {'real': len(blob),
                                 'expected': manifest.get('blob_size')})
    _verify_digest(manifest, 'weights_sha256', blob, WEIGHTS)

    net = ewaste_model.build_model(stored, seed=0)
    params = net.params
    entries = manifest.get('tensors') or []
    names = [entry.get('name') if isinstance(entry, dict) else None
             for entry in entries]
    if sorted(map(str, names)) != sorted(params):
        missing = sorted(set(params) - set(names))
        unexpected = sorted(set(names) - set(params), key=str)
        raise exceptions.CheckpointError(
            _('Checkpoint tensors do not match the model: missing '
              '%(missing)s, unexpected %(unexpected)s') %
            {'missing': ', '.join(missing) or '-',
             'unexpected': ', '.join(map(str, unexpected)) or '-'})

    itemsize = np.dtype(BLOB_DTYPE).itemsize
    offset = 0
    for entry in entries:
        name = entry['name']
        shape = tuple(entry.get('shape') or ())
        if shape != params[name].shape:
            raise exceptions.CheckpointError(
                _('Tensor %(name)s has shape %(stored)s in the checkpoint '
                  'but %(expected)s in the model') %
                {'name': name, 'stored': list(shape),
                 'expected': list(params[name].shape)})
        if entry.get('offset') != offset:
            raise exceptions.CheckpointError(
                _('Tensor %(name)s starts at byte %(real)s, expected '
                  '%(expected)d') % {'name': name,
                                     'real': entry.get('offset'),
                                     'expected': offset})
        count = int(np.prod(shape))
        params[name].data = np.frombuffer(
            blob, dtype=BLOB_DTYPE, count=count, offset=offset).reshape(
                shape).astype(np.float32)
        params.set_frozen(name, bool(entry.get('frozen')))
        offset += count * itemsize
    if offset != len(blob):
        raise exceptions.CheckpointError(
            _('Weights file has %d trailing bytes') % (len(blob) - offset))

    history = None
    history_path = os.path.join(path, HISTORY)
    if os.path.isfile(history_path):
        with open(history_path, 'rb') as fp:
            raw = fp.read()
        _verify_digest(manifest, 'history_sha256', raw, HISTORY)
        try:
            history = History.from_dict(json.loads(raw.decode('utf-8')))
        except (ValueError, TypeError, exceptions.ConfigError) as exc:
            raise exceptions.CheckpointError(
                _('Checkpoint history is invalid: %s') % exc)
    rng_state = manifest.get('rng_state') or {}
    LOG.debug('Loaded checkpoint of epoch %(epoch)s from %(path)s',
              {'epoch': manifest.get('epoch'), 'path': path})
    return Checkpoint(model=net, classes=tuple(manifest.get('classes', ())),
                      epoch=manifest.get('epoch'),
                      seed=rng_state.get('seed', 0), history=history)
