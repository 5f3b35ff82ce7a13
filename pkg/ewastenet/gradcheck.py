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

"""Central finite-difference verification of analytic gradients."""

import collections
import logging

import numpy as np

from ewastenet.common.i18n import _
from ewastenet import tensor


LOG = logging.getLogger(__name__)

GradcheckReport = collections.namedtuple(
    'GradcheckReport', ['max_error', 'checked', 'skipped'])
"""Outcome of a gradient check.

:ivar max_error: maximum relative error over checked coordinates.
:ivar checked: number of coordinates compared.
:ivar skipped: number of coordinates dropped by the smoothness guard.
"""


def relative_error(analytic, numeric, abs_floor):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric),
                                         abs_floor)


def gradcheck_report(f, points, eps=1e-3, num_coords=None, rng=None,
                     skip_nonsmooth=False, kink_tol=1e-3, abs_floor=1e-4):
    """Compare backward() gradients of f with central differences.

    The function is evaluated in float64 on copies of the points, so the
    originals are never modified.

    :param f: callable taking one tensor per point and returning a scalar
        tensor.
    :param points: a tensor or a list of tensors to differentiate against.
    :param eps: finite-difference step.
    :param num_coords: check only this many coordinates sampled uniformly
        without replacement over all points, None checks all of them.
    :param rng: numpy Generator used for sampling coordinates.
    :param skip_nonsmooth: skip coordinates where the one-sided differences
        disagree by more than ``kink_tol`` relative, i.e. where the step
        straddles a non-differentiable point.
    :param abs_floor: denominators of the relative error are at least this.
    :returns: :py:class:`GradcheckReport`.
    """
    if isinstance(points, tensor.Tensor):
        points = [points]
    with tensor.precision(np.float64):
        leaves = [tensor.Tensor(p.data.astype(np.float64), requires_grad=True)
                  for p in points]
        loss = f(*leaves)
        tensor.backward(loss)
        base = loss.item()
        analytic = [leaf.grad.reshape(-1) for leaf in leaves]

        coords = [(i, j) for i, leaf in enumerate(leaves)
                  for j in range(leaf.size)]
        if num_coords is not None and num_coords < len(coords):
            rng = rng if rng is not None else np.random.default_rng(0)
            chosen = rng.choice(len(coords), size=num_coords, replace=False)
            coords = [coords[k] for k in sorted(chosen)]

        max_error, checked, skipped = 0.0, 0, 0
        with tensor.no_grad():
            for i, j in coords:
                flat = leaves[i].data.reshape(-1)
                original = flat[j]
                flat[j] = original + eps
                plus = f(*leaves).item()
                flat[j] = original - eps
                minus = f(*leaves).item()
                flat[j] = original

                if skip_nonsmooth:
                    right, left = (plus - base) / eps, (base - minus) / eps
                    if abs(right - left) > kink_tol * max(
                            abs(right), abs(left), abs_floor):
                        skipped += 1
                        continue
                numeric = (plus - minus) / (2.0 * eps)
                error = relative_error(analytic[i][j], numeric, abs_floor)
                max_error = max(max_error, error)
                checked += 1

    LOG.debug('Gradient check: %(checked)d coordinates checked, '
              '%(skipped)d skipped, max relative error %(error)g',
              {'checked': checked, 'skipped': skipped, 'error': max_error})
    return GradcheckReport(max_error, checked, skipped)


def finite_diff_check(f, points, eps=1e-3, min_checked=None, **kwargs):
    """Return the maximum relative gradient error of f at points.

    Accepts the same arguments as :py:func:`gradcheck_report`.

    :param min_checked: fail if fewer coordinates than this survived the
        smoothness guard.
    :raises: ValueError if too few coordinates were checked.
    """
    report = gradcheck_report(f, points, eps=eps, **kwargs)
    if min_checked is not None and report.checked < min_checked:
        raise ValueError(
            _('Only %(checked)d coordinates checked, %(min)d required') %
            {'checked': report.checked, 'min': min_checked})
    return report.max_error
