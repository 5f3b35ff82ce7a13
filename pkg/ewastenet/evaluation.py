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

"""Classification metrics, ROC curves and report rendering."""

import csv
import dataclasses
import io
import json
import logging
import math
import os
import typing

import numpy as np
from scipy import integrate

from ewastenet.common import exceptions
from ewastenet.common.i18n import _
from ewastenet.common import utils


LOG = logging.getLogger(__name__)

REPORT_JSON = 'report.json'
CONFUSION_CSV = 'confusion.csv'
ROC_CSV = 'roc.csv'
MICRO = 'micro'


@dataclasses.dataclass
class ConfusionMatrix:
    """Counts of (true, predicted) pairs.

    :ivar counts: C x C int64 array, rows are true classes and columns
        predicted classes.
    :ivar classes: class names.
    """
    counts: np.ndarray
    classes: tuple

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def trace(self):
        return int(np.trace(self.counts))

    def __eq__(self, other):
        return (isinstance(other, ConfusionMatrix)
                and tuple(self.classes) == tuple(other.classes)
                and np.array_equal(self.counts, other.counts))


def confusion_matrix(true_labels, predicted_labels, num_classes,
                     classes=None):
    """Count label pairs.

    :param classes: class names, defaults to the label numbers.
    :raises: ValueError for lists of different length or labels outside
        [0, num_classes).
    """
    true_labels = np.asarray(true_labels, dtype=np.int64).reshape(-1)
    predicted_labels = np.asarray(predicted_labels,
                                  dtype=np.int64).reshape(-1)
    if len(true_labels) != len(predicted_labels):
        raise ValueError(_('Got %(true)d true and %(pred)d predicted labels')
                         % {'true': len(true_labels),
                            'pred': len(predicted_labels)})
    for labels in (true_labels, predicted_labels):
        if len(labels) and (labels.min() < 0 or
                            labels.max() >= num_classes):
            raise ValueError(_('Labels must be in [0, %d)') % num_classes)
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (true_labels, predicted_labels), 1)
    if classes is None:
        classes = tuple(str(k) for k in range(num_classes))
    if len(classes) != num_classes:
        raise ValueError(_('Expected %d class names') % num_classes)
    return ConfusionMatrix(counts=counts, classes=tuple(classes))


def _divide(numerator, denominator):
    return float(numerator) / denominator if denominator else 0.0


def gorodkin_mcc(counts):
    """Multiclass Matthews correlation coefficient of a confusion matrix.

    :returns: (mcc, defined); an undefined coefficient is reported as 0.
    """
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    correct = np.trace(counts)
    predicted = counts.sum(axis=0)
    actual = counts.sum(axis=1)
    numerator = correct * total - np.dot(predicted, actual)
    denominator = math.sqrt((total ** 2 - np.dot(predicted, predicted)) *
                            (total ** 2 - np.dot(actual, actual)))
    if denominator == 0:
        return 0.0, False
    return float(numerator / denominator), True


@dataclasses.dataclass
class ClassMetrics:
    name: str
    precision: float
    recall: float
    f1: float
    support: int
    auc: typing.Optional[float] = None


@dataclasses.dataclass
class RocCurve:
    """One-vs-rest ROC points, ordered by decreasing threshold.

    The first point is (0, 0) at an infinite threshold. ``auc`` is None
    when the class has no positive or no negative sample.
    """
    label: str
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: typing.Optional[float]


@dataclasses.dataclass
class MetricsReport:
    """Evaluation summary.

    :ivar undefined: names of metrics whose denominator was zero, e.g.
        ``precision:TV``; their values are reported as 0.
    :ivar curves: ROC curves, rendered to CSV only.
    """
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    mcc: float
    per_class: list
    confusion: ConfusionMatrix
    micro_average_auc: typing.Optional[float] = None
    undefined: list = dataclasses.field(default_factory=list)
    curves: list = dataclasses.field(default_factory=list)

    def to_dict(self):
        return {
            'accuracy': self.accuracy,
            'macro_precision': self.macro_precision,
            'macro_recall': self.macro_recall,
            'macro_f1': self.macro_f1,
            'weighted_precision': self.weighted_precision,
            'weighted_recall': self.weighted_recall,
            'weighted_f1': self.weighted_f1,
            'mcc': self.mcc,
            'micro_average_auc': self.micro_average_auc,
            'per_class': [dataclasses.asdict(row) for row in self.per_class],
            'classes': list(self.confusion.classes),
            'confusion_matrix': self.confusion.counts.tolist(),
            'undefined': list(self.undefined),
        }

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        try:
            confusion = ConfusionMatrix(
                counts=np.array(data.pop('confusion_matrix'),
                                dtype=np.int64),
                classes=tuple(data.pop('classes')))
            per_class = [ClassMetrics(**row) for row in data.pop('per_class')]
            return cls(confusion=confusion, per_class=per_class, **data)
        except (KeyError, TypeError) as exc:
            raise exceptions.EWasteNetError(
                _('Malformed metrics report: %s') % exc)


def classification_metrics(cm):
    """Accuracy, macro and weighted scores and MCC of a confusion matrix.

    A per-class score with a zero denominator is 0 and listed in
    ``undefined``.

    :returns: :py:class:`MetricsReport` without ROC data.
    :raises: ValueError for an empty matrix.
    """
    counts = cm.counts
    total = cm.total
    if total == 0:
        raise ValueError(_('Cannot compute metrics of an empty confusion '
                           'matrix'))
    diag = np.diag(counts)
    actual = counts.sum(axis=1)
    predicted = counts.sum(axis=0)
    rows, undefined = [], []
    for k, name in enumerate(cm.classes):
        if not predicted[k]:
            undefined.append('precision:%s' % name)
        if not actual[k]:
            undefined.append('recall:%s' % name)
        precision = _divide(diag[k], predicted[k])
        recall = _divide(diag[k], actual[k])
        if precision + recall:
            f1 = 2 * precision * recall / (precision + recall)
        else:
            f1 = 0.0
            undefined.append('f1:%s' % name)
        rows.append(ClassMetrics(name=name, precision=precision,
                                 recall=recall, f1=f1,
                                 support=int(actual[k])))
    mcc, defined = gorodkin_mcc(counts)
    if not defined:
        undefined.append('mcc')
    if undefined:
        LOG.warning('Undefined metrics reported as 0: %s',
                    ', '.join(undefined))

    def macro(field):
        return float(np.mean([getattr(row, field) for row in rows]))

    def weighted(field):
        return float(np.dot([getattr(row, field) for row in rows],
                            actual) / total)

    return MetricsReport(
        accuracy=cm.trace / total,
        macro_precision=macro('precision'), macro_recall=macro('recall'),
        macro_f1=macro('f1'),
        weighted_precision=weighted('precision'),
        weighted_recall=weighted('recall'), weighted_f1=weighted('f1'),
        mcc=mcc, per_class=rows, confusion=cm, undefined=undefined)


def _binary_roc(scores, positives, label):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    positives = np.asarray(positives, dtype=bool).reshape(-1)
    num_pos = int(positives.sum())
    num_neg = len(positives) - num_pos
    order = np.argsort(-scores, kind='stable')
    scores, positives = scores[order], positives[order]
    # last index of every run of equal scores
    ends = np.flatnonzero(np.r_[scores[1:] != scores[:-1], True])
    tps = np.cumsum(positives)[ends]
    fps = (ends + 1) - tps
    thresholds = np.r_[np.inf, scores[ends]]
    tpr = np.r_[0.0, tps / num_pos] if num_pos else np.zeros(len(ends) + 1)
    fpr = np.r_[0.0, fps / num_neg] if num_neg else np.zeros(len(ends) + 1)
    if num_pos and num_neg:
        auc = float(integrate.trapezoid(tpr, fpr))
    else:
        LOG.warning('ROC of %(label)s is undefined: %(pos)d positive and '
                    '%(neg)d negative samples',
                    {'label': label, 'pos': num_pos, 'neg': num_neg})
        auc = None
    return RocCurve(label=label, thresholds=thresholds, fpr=fpr, tpr=tpr,
                    auc=auc)


def _check_scores(scores, true_labels):
    scores = np.asarray(scores, dtype=np.float64)
    true_labels = np.asarray(true_labels, dtype=np.int64).reshape(-1)
    if scores.ndim != 2 or scores.shape[0] != len(true_labels) \
            or scores.shape[1] < 2:
        raise exceptions.ShapeError(
            _('Expected N x C scores with C >= 2 and N labels'),
            scores.shape, true_labels.shape)
    if len(true_labels) and (true_labels.min() < 0 or
                             true_labels.max() >= scores.shape[1]):
        raise ValueError(_('Labels must be in [0, %d)') % scores.shape[1])
    return scores, true_labels


def roc_curve(scores, true_labels, class_index, label=None):
    """One-vs-rest ROC of one class, thresholds at every unique score.

    :param scores: N x C class probabilities.
    :returns: :py:class:`RocCurve`.
    """
    scores, true_labels = _check_scores(scores, true_labels)
    return _binary_roc(scores[:, class_index], true_labels == class_index,
                       str(class_index) if label is None else label)


def micro_average_roc(scores, true_labels):
    """ROC over all (sample, class) one-vs-rest decisions pooled."""
    scores, true_labels = _check_scores(scores, true_labels)
    onehot = np.zeros(scores.shape, dtype=bool)
    onehot[np.arange(len(true_labels)), true_labels] = True
    return _binary_roc(scores.reshape(-1), onehot.reshape(-1), MICRO)


def build_report(true_labels, scores, classes):
    """Full report of predictions given as N x C class probabilities."""
    scores, true_labels = _check_scores(scores, true_labels)
    cm = confusion_matrix(true_labels, scores.argmax(axis=1), len(classes),
                          classes)
    report = classification_metrics(cm)
    for k, row in enumerate(report.per_class):
        curve = roc_curve(scores, true_labels, k, label=row.name)
        row.auc = curve.auc
        if curve.auc is None:
            report.undefined.append('auc:%s' % row.name)
        report.curves.append(curve)
    micro = micro_average_roc(scores, true_labels)
    report.micro_average_auc = micro.auc
    report.curves.append(micro)
    LOG.info('Accuracy %(acc).4f, macro recall %(recall).4f, MCC %(mcc).4f, '
             'micro-average AUC %(auc)s',
             {'acc': report.accuracy, 'recall': report.macro_recall,
              'mcc': report.mcc, 'auc': report.micro_average_auc})
    return report


def _csv(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator='\n')
    writer.writerows(rows)
    return buf.getvalue()


def _number(value):
    return repr(float(value))


def render_report(report):
    """Render the report files.

    :returns: dict of file name to text: ``report.json``,
        ``confusion.csv`` and ``roc.csv``.
    """
    classes = list(report.confusion.classes)
    confusion = [['true\\predicted'] + classes]
    for name, row in zip(classes, report.confusion.counts.tolist()):
        confusion.append([name] + row)
    roc = [['class', 'threshold', 'fpr', 'tpr']]
    for curve in report.curves:
        for threshold, fpr, tpr in zip(curve.thresholds, curve.fpr,
                                       curve.tpr):
            roc.append([curve.label, _number(threshold), _number(fpr),
                        _number(tpr)])
    return {REPORT_JSON: utils.dump_json(report.to_dict()),
            CONFUSION_CSV: _csv(confusion),
            ROC_CSV: _csv(roc)}


def write_report(report, out_dir):
    """Write the rendered report files to out_dir, atomically."""
    rendered = render_report(report)
    for name in sorted(rendered):
        utils.atomic_write(os.path.join(out_dir, name), rendered[name])
    return sorted(os.path.join(out_dir, name) for name in rendered)


def report_from_json(text):
    """Parse ``report.json`` back into a :py:class:`MetricsReport`."""
    return MetricsReport.from_dict(json.loads(text))


# Published test-set reconstruction: test counts per class and the
# misclassifications (true, predicted, count) described for it.
PUBLISHED_CLASSES = ('Camera', 'Keyboards', 'Laptop', 'Microwave', 'Mobile',
                     'Mouses', 'Smartwatch', 'TV')
PUBLISHED_TEST_COUNTS = (16, 22, 21, 20, 33, 19, 14, 31)
PUBLISHED_ERRORS = (('Mobile', 'TV', 4), ('Microwave', 'TV', 1),
                    ('Mobile', 'Smartwatch', 1), ('Camera', 'Smartwatch', 1))


def published_confusion_matrix():
    """Confusion matrix of the published test results."""
    counts = np.diag(PUBLISHED_TEST_COUNTS).astype(np.int64)
    for true, predicted, count in PUBLISHED_ERRORS:
        t = PUBLISHED_CLASSES.index(true)
        p = PUBLISHED_CLASSES.index(predicted)
        counts[t, t] -= count
        counts[t, p] += count
    return ConfusionMatrix(counts=counts, classes=PUBLISHED_CLASSES)
