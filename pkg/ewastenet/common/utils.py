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

"""Generic helpers shared by all ewastenet modules."""

import json
import logging
import os
import tempfile

import numpy as np

from ewastenet.common import exceptions
from ewastenet.common.i18n import _


LOG = logging.getLogger(__name__)

SEED_ENV = 'EWASTENET_SEED'
"""Environment variable consulted when no seed is given explicitly."""

MAX_SEED = 2 ** 64 - 1

# Leading key of every derived random stream, so that streams used for
# different purposes never collide for the same seed.
SPLIT_STREAM = 0
INIT_STREAM = 1
SHUFFLE_STREAM = 2
AUGMENT_STREAM = 3
DROPOUT_STREAM = 4
SYNTHETIC_STREAM = 5
CHECK_STREAM = 6


def validate_seed(seed):
    """Check that seed is an unsigned 64-bit integer and return it."""
    if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)):
        raise exceptions.ConfigError(
            _('seed must be an integer, got %r') % (seed,))
    if not 0 <= int(seed) <= MAX_SEED:
        raise exceptions.ConfigError(
            _('seed must be in range [0, 2**64), got %d') % seed)
    return int(seed)


def resolve_seed(*candidates):
    """Return the first seed which is not None.

    Falls back to the ``EWASTENET_SEED`` environment variable and finally
    to 0.
    """
    for candidate in candidates:
        if candidate is not None:
            return validate_seed(candidate)
    env = os.environ.get(SEED_ENV)
    if env:
        try:
            return validate_seed(int(env))
        except ValueError:
            raise exceptions.ConfigError(
                _('%(env)s must be an integer, got %(value)r') %
                {'env': SEED_ENV, 'value': env})
    return 0


def derive_rng(seed, *keys):
    """Create an independent generator for (seed, keys).

    This is the only source of randomness in the package: a PCG64 generator
    seeded through :class:`numpy.random.SeedSequence` with ``keys`` as the
    spawn key. Streams for different keys are statistically independent and
    do not depend on the order they are created in.

    :param seed: unsigned 64-bit integer seed.
    :param keys: non-negative integers identifying the stream, the first
        one is one of the ``*_STREAM`` constants of this module.
    """
    seq = np.random.SeedSequence(entropy=validate_seed(seed),
                                 spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(seq))


def dump_json(obj):
    """Serialize obj to JSON in a byte-stable way."""
    return json.dumps(obj, sort_keys=True, indent=2) + '\n'


def atomic_write(path, content):
    """Write content to path via a temporary file and a rename.

    :param path: destination file.
    :param content: bytes or text (written as UTF-8).
    """
    if isinstance(content, str):
        content = content.encode('utf-8')
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory,
                                    prefix='.%s.' % os.path.basename(path))
    try:
        with os.fdopen(fd, 'wb') as fp:
            fp.write(content)
            fp.flush()
            os.fsync(fp.fileno())
        os.replace(tmp_path, path)
    except BaseException:
        try:
            os.unlink(tmp_path)
        except OSError:
            pass
        raise
    LOG.debug('Wrote %(size)d bytes to %(path)s',
              {'size': len(content), 'path': path})


def check_keys(data, allowed, section):
    """Reject unknown keys of a configuration mapping.

    :param data: mapping loaded from a configuration document.
    :param allowed: collection of accepted keys.
    :param section: dotted name of the section, used in the error message.
    :raises: ConfigError listing all unknown keys.
    """
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise exceptions.ConfigError(
            _('section %(section)s must be a mapping, got %(real)r') %
            {'section': section, 'real': data})
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise exceptions.ConfigError(
            [_('unknown key %(key)s in section %(section)s') %
             {'key': key, 'section': section} for key in unknown])
    return data
