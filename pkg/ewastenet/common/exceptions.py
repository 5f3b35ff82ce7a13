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

"""Exceptions raised by ewastenet."""

from ewastenet.common.i18n import _


class EWasteNetError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(EWasteNetError, ValueError):
    """Tensor shapes are incompatible with an operation.

    :ivar shapes: the offending shapes, in the order they were given.
    """

    def __init__(self, message, *shapes):
        self.shapes = tuple(tuple(s) for s in shapes)
        if shapes:
            message = '%s (%s)' % (message,
                                   ' vs '.join(str(list(s)) for s in shapes))
        super(ShapeError, self).__init__(message)


class ConfigError(EWasteNetError, ValueError):
    """A configuration value violates an invariant.

    :ivar violations: list of human-readable violated invariants.
    """

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        msg = (_('Invalid configuration: %s') %
               '; '.join(self.violations))
        super(ConfigError, self).__init__(msg)


class DatasetError(EWasteNetError):
    """A dataset directory cannot be used.

    :ivar offenders: paths that caused the error, may be empty.
    """

    def __init__(self, message, offenders=()):
        self.offenders = list(offenders)
        if self.offenders:
            message = '%s: %s' % (message, ', '.join(self.offenders))
        super(DatasetError, self).__init__(message)


class ImageDecodeError(EWasteNetError):
    """An image file is truncated or not in a supported format.

    :ivar path: path of the image.
    """

    def __init__(self, path, reason):
        self.path = path
        self.reason = reason
        msg = _('Cannot decode image %(path)s: %(reason)s') % {
            'path': path, 'reason': reason}
        super(ImageDecodeError, self).__init__(msg)


class CheckpointNotFound(EWasteNetError):
    """Checkpoint directory or its manifest does not exist.

    :ivar path: requested checkpoint path.
    """

    def __init__(self, path):
        self.path = path
        msg = _('Checkpoint %s was not found') % path
        super(CheckpointNotFound, self).__init__(msg)


class CheckpointError(EWasteNetError):
    """Checkpoint contents are inconsistent with the manifest or config."""


class CheckFailed(EWasteNetError):
    """One or more self-verification checks failed.

    :ivar failed: names of the failed checks.
    """

    def __init__(self, failed):
        self.failed = list(failed)
        msg = _('Checks failed: %s') % ', '.join(self.failed)
        super(CheckFailed, self).__init__(msg)
