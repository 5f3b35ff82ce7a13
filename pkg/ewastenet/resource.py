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


class MetricsResource(object):
    """MetricsResource class

    This class is used to manage the summary fields of an evaluation report
    that the ``eval`` command displays.  An individual field consists of a
    'field_id' (key of the report) and a 'label' (value).
    """

    FIELDS = {
        'accuracy': 'Accuracy',
        'macro_precision': 'Macro Precision',
        'macro_recall': 'Macro Recall',
        'macro_f1': 'Macro F1',
        'weighted_precision': 'Weighted Precision',
        'weighted_recall': 'Weighted Recall',
        'weighted_f1': 'Weighted F1',
        'mcc': 'MCC',
        'micro_average_auc': 'Micro-average AUC',
        'samples': 'Samples',
        'split': 'Split',
        'undefined': 'Undefined Metrics',
    }
    """A mapping of all known report fields to their descriptions."""

    DEFAULT_FIELD_IDS = ['split',
                         'samples',
                         'accuracy',
                         'macro_precision',
                         'macro_recall',
                         'macro_f1',
                         'mcc',
                         'micro_average_auc']
    """Report fields displayed by default."""

    def __init__(self, field_ids=None, detailed=False):
        """Create a MetricsResource object

        :param field_ids:  A list of strings that the Resource object will
                           contain.  Each string must match an existing key in
                           FIELDS.
        :param detailed:   If True, use the all of the keys in FIELDS instead
                           of input field_ids
        """
        if field_ids is None:
            # Default field set in logical format, so don't sort
            field_ids = self.DEFAULT_FIELD_IDS

        if detailed:
            field_ids = sorted(self.FIELDS.keys())

        self._fields = tuple(field_ids)
        self._labels = tuple(self.FIELDS[x] for x in field_ids)

    @property
    def fields(self):
        """List of fields displayed for this resource."""
        return self._fields

    @property
    def labels(self):
        """List of labels for fields displayed for this resource."""
        return self._labels

    def row(self, summary):
        """Values of the displayed fields, in display order.

        :param summary: mapping of field id to value.
        """
        return tuple(summary.get(field) for field in self._fields)
