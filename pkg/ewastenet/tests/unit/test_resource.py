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

import unittest

from ewastenet import evaluation
from ewastenet import resource


class TestMetricsResource(unittest.TestCase):
    def test_default(self):
        res = resource.MetricsResource()
        self.assertEqual(tuple(res.DEFAULT_FIELD_IDS), res.fields)
        self.assertEqual(('Split', 'Samples', 'Accuracy'), res.labels[:3])

    def test_detailed_uses_all_fields_sorted(self):
        res = resource.MetricsResource(['mcc'], detailed=True)
        self.assertEqual(tuple(sorted(res.FIELDS)), res.fields)
        self.assertEqual(len(res.FIELDS), len(res.labels))

    def test_selected_fields(self):
        res = resource.MetricsResource(['mcc', 'accuracy'])
        self.assertEqual(('mcc', 'accuracy'), res.fields)
        self.assertEqual(('MCC', 'Accuracy'), res.labels)

    def test_unknown_field(self):
        self.assertRaises(KeyError, resource.MetricsResource, ['auc'])

    def test_report_fields_are_known(self):
        report = evaluation.classification_metrics(
            evaluation.published_confusion_matrix()).to_dict()
        extra = {'samples', 'split'}
        self.assertLessEqual(set(resource.MetricsResource.FIELDS) - extra,
                             set(report))

    def test_row(self):
        res = resource.MetricsResource(['split', 'mcc', 'samples'])
        self.assertEqual(('test', 0.5, None),
                         res.row({'split': 'test', 'mcc': 0.5,
                                  'accuracy': 1.0}))
