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

from .common.exceptions import EWasteNetError  # noqa
from .model import build_model, EWasteNet, EWasteNetConfig  # noqa
from .training import load_checkpoint, save_checkpoint  # noqa


__all__ = ['build_model', 'EWasteNet', 'EWasteNetConfig', 'EWasteNetError',
           'load_checkpoint', 'save_checkpoint']
