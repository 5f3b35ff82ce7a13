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

import types
import unittest

import ewastenet


class TestExposedAPI(unittest.TestCase):
    def test_only_model_api_exposed(self):
        exposed = {x for x in dir(ewastenet)
                   if not x.startswith('__')
                   and not isinstance(getattr(ewastenet, x),
                                      types.ModuleType)}
        self.assertEqual({'build_model', 'EWasteNet', 'EWasteNetConfig',
                          'EWasteNetError', 'load_checkpoint',
                          'save_checkpoint'},
                         exposed)
