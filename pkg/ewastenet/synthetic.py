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

"""Programmatically drawn stand-in for the e-waste image dataset.

Every class is a distinct silhouette of the device it is named after,
drawn with random placement, scale and color jitter on a noisy light
background.
"""

import logging
import os

import numpy as np
from skimage import draw

from ewastenet.common.i18n import _
from ewastenet.common import utils
from ewastenet import data


LOG = logging.getLogger(__name__)

CLASSES = ('Camera', 'Keyboards', 'Laptop', 'Microwave', 'Mobile', 'Mouses',
           'Smartwatch', 'TV')

_BASE_COLORS = {
    'Camera': (0.15, 0.15, 0.15),
    'Keyboards': (0.35, 0.35, 0.45),
    'Laptop': (0.6, 0.6, 0.65),
    'Microwave': (0.85, 0.85, 0.8),
    'Mobile': (0.1, 0.2, 0.5),
    'Mouses': (0.7, 0.2, 0.2),
    'Smartwatch': (0.2, 0.55, 0.3),
    'TV': (0.05, 0.05, 0.1),
}


class _Painter(object):
    """Draws on a canvas in object coordinates.

    Object coordinates are (y, x) pairs in [-0.5, 0.5] relative to the
    object center, multiplied by the object scale.
    """

    def __init__(self, canvas, center, scale):
        self.canvas = canvas
        self.center = center
        self.scale = scale

    def _points(self, points):
        size = self.canvas.shape[0]
        rows = [self.center[0] + y * self.scale * size for y, _x in points]
        cols = [self.center[1] + x * self.scale * size for _y, x in points]
        return np.array(rows), np.array(cols)

    def polygon(self, points, color):
        rows, cols = self._points(points)
        rr, cc = draw.polygon(rows, cols, shape=self.canvas.shape[:2])
        self.canvas[rr, cc] = color

    def box(self, top, left, bottom, right, color):
        self.polygon([(top, left), (top, right), (bottom, right),
                      (bottom, left)], color)

    def ellipse(self, y, x, ry, rx, color):
        (row,), (col,) = self._points([(y, x)])
        size = self.canvas.shape[0] * self.scale
        rr, cc = draw.ellipse(row, col, max(ry * size, 1.0),
                              max(rx * size, 1.0),
                              shape=self.canvas.shape[:2])
        self.canvas[rr, cc] = color


def _shade(color, factor):
    return tuple(float(np.clip(c * factor, 0.0, 1.0)) for c in color)


def _camera(p, color):
    p.box(-0.25, -0.4, 0.3, 0.4, color)
    p.box(-0.35, -0.3, -0.25, -0.1, color)
    p.ellipse(0.03, 0.0, 0.2, 0.2, (0.8, 0.85, 0.9))
    p.ellipse(0.03, 0.0, 0.1, 0.1, (0.05, 0.05, 0.05))


def _keyboard(p, color):
    p.box(-0.15, -0.48, 0.15, 0.48, color)
    for row in range(3):
        for col in range(8):
            top = -0.11 + row * 0.08
            left = -0.44 + col * 0.11
            p.box(top, left, top + 0.05, left + 0.08, (0.9, 0.9, 0.9))


def _laptop(p, color):
    p.box(-0.4, -0.35, 0.1, 0.35, color)
    p.box(-0.35, -0.3, 0.05, 0.3, (0.3, 0.5, 0.8))
    p.polygon([(0.1, -0.35), (0.1, 0.35), (0.3, 0.48), (0.3, -0.48)],
              _shade(color, 0.8))


def _microwave(p, color):
    p.box(-0.3, -0.45, 0.3, 0.45, color)
    p.box(-0.22, -0.38, 0.22, 0.15, (0.1, 0.1, 0.1))
    p.ellipse(-0.1, 0.3, 0.06, 0.06, (0.3, 0.3, 0.3))
    p.ellipse(0.1, 0.3, 0.06, 0.06, (0.3, 0.3, 0.3))


def _mobile(p, color):
    p.box(-0.45, -0.2, 0.45, 0.2, color)
    p.box(-0.38, -0.16, 0.35, 0.16, (0.55, 0.75, 0.95))
    p.ellipse(0.4, 0.0, 0.03, 0.03, (0.9, 0.9, 0.9))


def _mouse(p, color):
    p.ellipse(0.0, 0.0, 0.4, 0.25, color)
    p.box(-0.4, -0.01, -0.05, 0.01, (0.1, 0.1, 0.1))
    p.ellipse(-0.2, 0.0, 0.06, 0.03, (0.2, 0.2, 0.2))


def _smartwatch(p, color):
    p.box(-0.5, -0.12, 0.5, 0.12, _shade(color, 0.6))
    p.box(-0.2, -0.2, 0.2, 0.2, color)
    p.box(-0.15, -0.15, 0.15, 0.15, (0.05, 0.05, 0.05))


def _tv(p, color):
    p.box(-0.35, -0.48, 0.2, 0.48, color)
    p.box(-0.31, -0.44, 0.16, 0.44, (0.25, 0.3, 0.45))
    p.box(0.2, -0.04, 0.35, 0.04, color)
    p.box(0.35, -0.2, 0.4, 0.2, color)


_PAINTERS = {
    'Camera': _camera,
    'Keyboards': _keyboard,
    'Laptop': _laptop,
    'Microwave': _microwave,
    'Mobile': _mobile,
    'Mouses': _mouse,
    'Smartwatch': _smartwatch,
    'TV': _tv,
}


def render(class_name, size, rng):
    """Draw one image of class_name as H x W x 3 pixels in [0, 1]."""
    try:
        paint = _PAINTERS[class_name]
    except KeyError:
        raise ValueError(_('Unknown synthetic class %s') % class_name)
    background = rng.uniform(0.85, 1.0)
    canvas = np.clip(background + rng.normal(0.0, 0.02, (size, size, 3)),
                     0.0, 1.0)
    center = (size / 2.0 + rng.uniform(-1.0, 1.0) * size / 16.0,
              size / 2.0 + rng.uniform(-1.0, 1.0) * size / 16.0)
    scale = rng.uniform(0.7, 0.9)
    color = _shade(_BASE_COLORS[class_name], rng.uniform(0.85, 1.15))
    paint(_Painter(canvas, center, scale), color)
    return canvas.astype(np.float32)


def synthesize_dataset(root, per_class=8, size=64, seed=0):
    """Write the synthetic dataset as ``root/<Class>/<n>.ppm``.

    Image n of class k is drawn with the generator derived from
    (seed, k, n), so the output is a pure function of the arguments.

    :returns: :py:class:`ewastenet.data.DatasetIndex` of the written tree.
    """
    if per_class < 1 or size < 8:
        raise ValueError(_('per_class must be positive and size at least 8'))
    seed = utils.validate_seed(seed)
    for label, name in enumerate(CLASSES):
        directory = os.path.join(root, name)
        os.makedirs(directory, exist_ok=True)
        for n in range(per_class):
            rng = utils.derive_rng(seed, utils.SYNTHETIC_STREAM, label, n)
            data.encode_ppm(render(name, size, rng),
                            os.path.join(directory, '%03d.ppm' % n))
    LOG.info('Wrote %(count)d synthetic images of size %(size)d to '
             '%(root)s', {'count': per_class * len(CLASSES), 'size': size,
                          'root': root})
    return data.scan_dataset(root, verify=False)
