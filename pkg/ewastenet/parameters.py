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

"""Named model parameters with frozen flags."""

import collections
import logging

import numpy as np

from ewastenet.common.i18n import _
from ewastenet import tensor


LOG = logging.getLogger(__name__)


class ParameterScope(object):
    """A read-only view of the parameters under a dotted prefix."""

    def __init__(self, params, prefix):
        self.params = params
        self.prefix = prefix

    def name(self, name):
        return '%s.%s' % (self.prefix, name) if self.prefix else name

    def __getitem__(self, name):
        return self.params[self.name(name)]

    def __contains__(self, name):
        return self.name(name) in self.params

    def scope(self, prefix):
        return ParameterScope(self.params, self.name(prefix))


class ModelParameters(object):
    """Ordered mapping of dotted names to tensors.

    Insertion order is the serialization order of checkpoints. Frozen
    tensors do not require gradients and are skipped by optimizers;
    constants (e.g. fixed edge-detection kernels) are frozen for good.
    """

    def __init__(self):
        self._tensors = collections.OrderedDict()
        self._frozen = {}
        self._constants = set()

    def add(self, name, value, frozen=False, constant=False):
        """Register a new tensor and return it."""
        if name in self._tensors:
            raise ValueError(_('Parameter %s already exists') % name)
        frozen = frozen or constant
        t = tensor.Tensor(value, requires_grad=not frozen, name=name)
        self._tensors[name] = t
        self._frozen[name] = frozen
        if constant:
            self._constants.add(name)
        return t

    def __getitem__(self, name):
        try:
            return self._tensors[name]
        except KeyError:
            raise KeyError(_('Unknown parameter %s') % name)

    def __contains__(self, name):
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def scope(self, prefix):
        return ParameterScope(self, prefix)

    def is_frozen(self, name):
        return self._frozen[name]

    def is_constant(self, name):
        return name in self._constants

    def trainable(self):
        """List of (name, tensor) pairs an optimizer may update."""
        return [(name, t) for name, t in self._tensors.items()
                if not self._frozen[name]]

    def set_frozen(self, prefix, frozen=True):
        """Freeze or unfreeze every tensor whose name starts with prefix.

        :returns: number of tensors affected.
        """
        affected = 0
        for name, t in self._tensors.items():
            if name != prefix and not name.startswith(prefix + '.'):
                continue
            if name in self._constants:
                continue
            self._frozen[name] = frozen
            t.requires_grad = not frozen
            if frozen:
                t.grad = None
            affected += 1
        LOG.debug('%(action)s %(count)d tensors under %(prefix)s',
                  {'action': 'Froze' if frozen else 'Unfroze',
                   'count': affected, 'prefix': prefix})
        return affected

    def zero_grad(self):
        for _name, t in self.trainable():
            t.zero_grad()

    def count(self):
        """Return (trainable, frozen) element counts."""
        trainable = sum(t.size for name, t in self._tensors.items()
                        if not self._frozen[name])
        frozen = sum(t.size for name, t in self._tensors.items()
                     if self._frozen[name])
        return trainable, frozen

    def _copy_flags(self, other):
        other._frozen = dict(self._frozen)
        other._constants = set(self._constants)
        return other

    def with_tensors(self, replacements):
        """Return a copy sharing tensors except for the replaced names."""
        unknown = sorted(set(replacements) - set(self._tensors))
        if unknown:
            raise KeyError(_('Unknown parameters %s') % ', '.join(unknown))
        copy = self._copy_flags(ModelParameters())
        for name, t in self._tensors.items():
            copy._tensors[name] = replacements.get(name, t)
        return copy

    def astype(self, dtype):
        """Return a copy with every tensor converted to dtype."""
        copy = self._copy_flags(ModelParameters())
        with tensor.precision(dtype):
            for name, t in self._tensors.items():
                copy._tensors[name] = tensor.Tensor(
                    t.data, requires_grad=not self._frozen[name], name=name)
        return copy

    def snapshot(self):
        """Copies of all arrays, keyed by name."""
        return collections.OrderedDict(
            (name, np.array(t.data)) for name, t in self._tensors.items())
