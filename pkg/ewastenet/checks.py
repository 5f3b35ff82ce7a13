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

"""Self-checks of the numerical building blocks.

Every check is a function returning a short detail string and raising
:py:class:`CheckAssertion` when a property does not hold. The ``check``
command runs them all and reports failures by name.
"""

import collections
import logging

import numpy as np

from ewastenet.common import exceptions
from ewastenet.common.i18n import _
from ewastenet.common import utils
from ewastenet import data
from ewastenet import evaluation
from ewastenet import gradcheck
from ewastenet import model
from ewastenet import tensor
from ewastenet.tensor import Tensor


LOG = logging.getLogger(__name__)

CheckResult = collections.namedtuple('CheckResult',
                                     ['name', 'passed', 'detail'])

PUBLISHED_ACCURACY = 0.9602
PUBLISHED_MACRO_RECALL = 0.9670
PUBLISHED_MCC = 0.95
MCC_TOLERANCE = 0.0051
GRADIENT_TOLERANCE = 1e-3

_CHECKS = collections.OrderedDict()


class CheckAssertion(exceptions.EWasteNetError):
    pass


def _expect(condition, message, *args):
    if not condition:
        raise CheckAssertion(message % args if args else message)


def register(name):
    def decorator(func):
        _CHECKS[name] = func
        return func
    return decorator


def names():
    return list(_CHECKS)


@register('sobel')
def check_sobel(seed):
    constant = model.sobel_apply(Tensor(np.full((1, 1, 6, 6), 0.25)))
    _expect(not np.any(constant.data), _('constant image has edges'))
    step = np.array([[0.0, 0.0, 1.0]] * 3).reshape(1, 1, 3, 3)
    out = model.sobel_apply(Tensor(step)).data
    _expect(out[0, 0, 1, 1] == 4.0,
            _('column step gives gx=%s, expected 4'), out[0, 0, 1, 1])
    _expect(out[0, 1, 1, 1] == 0.0,
            _('column step gives gy=%s, expected 0'), out[0, 1, 1, 1])
    return _('constant image 0, column step gx=4')


@register('aspp')
def check_aspp(seed):
    cfg = model.EWasteNetConfig()
    net = model.build_model(cfg, seed)
    image = Tensor(utils.derive_rng(seed, utils.CHECK_STREAM, 0).normal(
        size=(1, 3, 16, 16)))
    with tensor.no_grad():
        out = model.aspp_forward(image, net.params.scope('pyramid.aspp'),
                                 cfg.aspp)
    _expect(out.shape == (1, cfg.aspp.out_channels, 16, 16),
            _('ASPP output shape %s'), out.shape)
    _expect(cfg.aspp.out_channels == 124,
            _('ASPP has %d channels, expected 124'), cfg.aspp.out_channels)
    return _('%d channels, spatial size kept') % cfg.aspp.out_channels


@register('cbam')
def check_cbam(seed):
    cfg = model.toy_config()
    net = model.build_model(cfg, seed)
    x = Tensor(utils.derive_rng(seed, utils.CHECK_STREAM, 1).normal(
        size=(2, cfg.aspp.out_channels, 8, 8)))
    with tensor.no_grad():
        out, spatial, channel = model.cbam_forward(
            x, net.params.scope('pyramid.cbam'), cfg.cbam,
            return_gates=True)
    _expect(out.shape == x.shape, _('CBAM changed the shape to %s'),
            out.shape)
    for gate in (spatial, channel):
        _expect(np.all((gate.data > 0) & (gate.data < 1)),
                _('attention gate outside (0, 1)'))
    return _('shape kept, gates in (0, 1)')


@register('fusion')
def check_fusion(seed):
    cfg = model.toy_config()
    net = model.build_model(cfg, seed)
    rng = utils.derive_rng(seed, utils.CHECK_STREAM, 2)
    width = cfg.backbone.embed_dim
    f1, f2 = (Tensor(rng.normal(size=(4, width))) for _k in range(2))
    with tensor.no_grad():
        probs = model.fusion_head_forward(f1, f2, net.params.scope('head'),
                                          cfg.fusion).data
    _expect(probs.shape == (4, cfg.fusion.num_classes),
            _('fusion output shape %s'), probs.shape)
    _expect(np.all(probs >= 0) and np.allclose(probs.sum(axis=1), 1.0,
                                               atol=1e-5),
            _('fusion rows are not probability distributions'))
    return _('%d classes, rows sum to 1') % cfg.fusion.num_classes


@register('parameters')
def check_parameters(seed):
    net = model.build_model(seed=seed)
    trainable, frozen = net.count_trainable_parameters()
    _expect(trainable < model.PARAMETER_BUDGET,
            _('%d trainable parameters exceed the budget'), trainable)
    analytic = model.analytic_parameter_count(net.cfg)
    for group, train_count, frozen_count in model.parameter_table(
            net.params):
        _expect(analytic.get(group) == train_count + frozen_count,
                _('group %s does not match its closed-form count'), group)
    return _('%(trainable)d trainable, %(frozen)d frozen') % {
        'trainable': trainable, 'frozen': frozen}


@register('gradients')
def check_gradients(seed):
    net = model.build_model(model.toy_config(), seed)
    params = net.params.astype(np.float64)
    trainable = [name for name, _t in params.trainable()]
    rng = utils.derive_rng(seed, utils.CHECK_STREAM, 3)
    with tensor.precision(np.float64):
        images = Tensor(rng.normal(size=(2, 3, 16, 16)))
    labels = np.array([1, 5])

    def loss(*leaves):
        replaced = params.with_tensors(dict(zip(trainable, leaves)))
        return net.with_params(replaced).loss(images, labels)

    error = gradcheck.finite_diff_check(
        loss, [params[name] for name in trainable], eps=1e-5,
        num_coords=300, rng=rng, skip_nonsmooth=True, kink_tol=0.1,
        min_checked=200)
    _expect(error < GRADIENT_TOLERANCE,
            _('maximum relative gradient error %g'), error)
    return _('maximum relative error %.2e') % error


@register('split')
def check_split(seed):
    counts = [5 * n for n in evaluation.PUBLISHED_TEST_COUNTS]
    entries = tuple(('%s/%03d.png' % (name, k), label)
                    for label, name in enumerate(evaluation.PUBLISHED_CLASSES)
                    for k in range(counts[label]))
    index = data.DatasetIndex(root='', classes=evaluation.PUBLISHED_CLASSES,
                              entries=entries)
    spec = data.split_dataset(index, data.DEFAULT_RATIOS, seed)
    _expect(set(spec.assignment) == {path for path, _l in entries},
            _('split does not cover every image exactly once'))
    for row, total in zip(spec.counts(index), index.class_counts()):
        for ratio, count in zip(data.DEFAULT_RATIOS, row[1:]):
            _expect(abs(count - ratio * total) <= 1,
                    _('class %s is not stratified'), row[0])
    again = data.split_dataset(index, data.DEFAULT_RATIOS, seed)
    _expect(again.assignment == spec.assignment,
            _('split is not deterministic'))
    return _('%d images, stratified within one image') % len(entries)


@register('metrics')
def check_metrics(seed):
    cm = evaluation.published_confusion_matrix()
    report = evaluation.classification_metrics(cm)
    _expect(abs(report.accuracy - PUBLISHED_ACCURACY) < 5e-5,
            _('accuracy %f'), report.accuracy)
    _expect(abs(report.macro_recall - PUBLISHED_MACRO_RECALL) < 5e-5,
            _('macro recall %f'), report.macro_recall)
    _expect(abs(report.mcc - PUBLISHED_MCC) <= MCC_TOLERANCE,
            _('MCC %f'), report.mcc)
    # Correlation of the one-hot indicators, centred per class.
    counts = cm.counts
    rows, cols = np.nonzero(counts)
    weights = counts[rows, cols]
    k = counts.shape[0]
    true = np.repeat(np.eye(k)[rows], weights, axis=0)
    pred = np.repeat(np.eye(k)[cols], weights, axis=0)
    true, pred = true - true.mean(axis=0), pred - pred.mean(axis=0)
    brute = np.sum(true * pred) / np.sqrt(np.sum(true * true) *
                                          np.sum(pred * pred))
    _expect(abs(brute - report.mcc) < 1e-9,
            _('MCC differs from the indicator correlation %f'), brute)
    return _('accuracy %(acc).4f, MCC %(mcc).4f') % {'acc': report.accuracy,
                                                     'mcc': report.mcc}


@register('roc')
def check_roc(seed):
    labels = np.array([0, 0, 1, 1, 2, 2])
    scores = np.eye(3)[labels] * 0.8 + 0.2 / 3
    curves = [evaluation.roc_curve(scores, labels, k) for k in range(3)]
    _expect(all(curve.auc == 1.0 for curve in curves),
            _('separable scores do not give AUC 1'))
    micro = evaluation.micro_average_roc(scores, labels)
    _expect(micro.auc == 1.0, _('micro-average AUC %s'), micro.auc)
    return _('separable scores give AUC 1')


def run_checks(selected=None, seed=0):
    """Run the named checks, all of them by default.

    A failing check does not stop the others.

    :returns: list of :py:class:`CheckResult` in registration order.
    :raises: ValueError for unknown check names.
    """
    selected = names() if not selected else list(selected)
    unknown = sorted(set(selected) - set(_CHECKS))
    if unknown:
        raise ValueError(_('Unknown checks: %s') % ', '.join(unknown))
    results = []
    for name, func in _CHECKS.items():
        if name not in selected:
            continue
        try:
            detail = func(seed)
        except Exception as exc:
            LOG.debug('Check %(name)s failed: %(err)s',
                      {'name': name, 'err': exc}, exc_info=True)
            results.append(CheckResult(name, False, str(exc)))
        else:
            results.append(CheckResult(name, True, detail))
    return results
