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

"""Dataset ingestion, image decoding, preprocessing and augmentation.

Datasets are laid out as ``root/<ClassName>/<file>.ppm|.png``. Pixels are
handled as H x W x 3 float32 arrays in [0, 1] until :py:func:`normalize`
turns a batch into an NCHW tensor.
"""

import collections
import concurrent.futures
import dataclasses
import json
import logging
import math
import os
import tempfile
import threading

import numpy as np
from oslo_concurrency import processutils
from skimage import io as skio
from skimage import transform

from ewastenet.common import exceptions
from ewastenet.common.i18n import _
from ewastenet.common import utils
from ewastenet import functional
from ewastenet.tensor import Tensor


LOG = logging.getLogger(__name__)

IMAGE_EXTENSIONS = ('.ppm', '.png')
SPLITS = ('train', 'val', 'test')
DEFAULT_RATIOS = (0.7, 0.1, 0.2)
RATIO_TOLERANCE = 1e-9

_PNG_SIGNATURE = b'\x89PNG\r\n\x1a\n'
_WHITESPACE = b' \t\n\r\v\f'


@dataclasses.dataclass
class ImageSample:
    """One decoded image.

    :ivar pixels: H x W x 3 float32 array in [0, 1].
    :ivar label: class index.
    :ivar source_path: dataset-relative path of the file.
    """
    pixels: np.ndarray
    label: int
    source_path: str


@dataclasses.dataclass(frozen=True)
class DatasetIndex:
    """Files of a dataset directory with their class labels.

    :ivar root: dataset root directory.
    :ivar classes: class names, sorted.
    :ivar entries: tuple of (relative posix path, class index), sorted by
        class and file name.
    """
    root: str
    classes: tuple
    entries: tuple

    def __len__(self):
        return len(self.entries)

    def path(self, relative):
        return os.path.join(self.root, *relative.split('/'))

    def class_counts(self):
        counts = [0] * len(self.classes)
        for _path, label in self.entries:
            counts[label] += 1
        return counts


def _list_images(directory):
    return sorted(name for name in os.listdir(directory)
                  if os.path.splitext(name)[1].lower() in IMAGE_EXTENSIONS
                  and os.path.isfile(os.path.join(directory, name)))


def scan_dataset(root, verify=True):
    """Index a class-per-directory dataset.

    :param root: dataset root directory.
    :param verify: decode every file and fail on undecodable ones.
    :returns: :py:class:`DatasetIndex`.
    :raises: DatasetError if the root has no images or some files cannot
        be decoded.
    """
    if not os.path.isdir(root):
        raise exceptions.DatasetError(
            _('Dataset root %s is not a directory') % root)
    classes = sorted(name for name in os.listdir(root)
                     if os.path.isdir(os.path.join(root, name)))
    classes = [name for name in classes
               if _list_images(os.path.join(root, name))]
    if not classes:
        raise exceptions.DatasetError(
            _('Dataset root %s contains no class directories with images')
            % root)

    entries = []
    offenders = []
    for label, name in enumerate(classes):
        for filename in _list_images(os.path.join(root, name)):
            relative = '%s/%s' % (name, filename)
            if verify:
                try:
                    decode_image(os.path.join(root, name, filename))
                except exceptions.ImageDecodeError as exc:
                    LOG.warning('Skipping unreadable image: %s', exc)
                    offenders.append(relative)
                    continue
            entries.append((relative, label))
    if offenders:
        raise exceptions.DatasetError(
            _('Dataset contains unreadable images'), offenders)

    LOG.debug('Scanned %(root)s: %(count)d images in %(classes)d classes',
              {'root': root, 'count': len(entries),
               'classes': len(classes)})
    return DatasetIndex(root=root, classes=tuple(classes),
                        entries=tuple(entries))


def validate_ratios(ratios):
    ratios = tuple(float(r) for r in ratios)
    violations = []
    if len(ratios) != len(SPLITS):
        violations.append(_('exactly three split ratios are required'))
    elif any(r < 0 or not math.isfinite(r) for r in ratios):
        violations.append(_('split ratios must be non-negative'))
    elif abs(sum(ratios) - 1.0) > RATIO_TOLERANCE:
        violations.append(_('split ratios must sum to 1, got %s') %
                          sum(ratios))
    if violations:
        raise exceptions.ConfigError(violations)
    return ratios


def apportion(count, ratios):
    """Split count items by ratios with largest-remainder rounding.

    Every share is the floor of its quota or one more, so each split stays
    within one item of its target. Remainders go to the largest fractional
    parts, ties in train, val, test order.

    Flooring train and val and giving test the rest can push test more
    than one item past its quota (9 items at 0.7/0.1/0.2 would give
    6/0/3), so the remainder is shared out instead.
    """
    quotas = [count * r for r in ratios]
    shares = [int(math.floor(q + RATIO_TOLERANCE)) for q in quotas]
    leftover = count - sum(shares)
    order = sorted(range(len(ratios)),
                   key=lambda k: (-(quotas[k] - shares[k]), k))
    for k in order[:leftover]:
        shares[k] += 1
    return shares


@dataclasses.dataclass(frozen=True)
class SplitSpec:
    """Seeded assignment of dataset entries to train/val/test.

    :ivar seed: seed the assignment was derived from.
    :ivar ratios: (train, val, test) fractions.
    :ivar classes: class names of the indexed dataset.
    :ivar assignment: mapping of relative path to split tag.
    """
    seed: int
    ratios: tuple
    classes: tuple
    assignment: dict

    def to_json(self):
        return utils.dump_json({'seed': self.seed,
                                'ratios': list(self.ratios),
                                'classes': list(self.classes),
                                'assignment': self.assignment})

    @classmethod
    def from_json(cls, text):
        try:
            data = json.loads(text)
        except ValueError as exc:
            raise exceptions.ConfigError(
                _('split file is not valid JSON: %s') % exc)
        utils.check_keys(data, ('seed', 'ratios', 'classes', 'assignment'),
                         'split')
        missing = sorted({'seed', 'ratios', 'classes', 'assignment'} -
                         set(data))
        if missing:
            raise exceptions.ConfigError(
                _('split file lacks %s') % ', '.join(missing))
        bad = sorted(path for path, tag in data['assignment'].items()
                     if tag not in SPLITS)
        if bad:
            raise exceptions.ConfigError(
                _('unknown split tag for %s') % ', '.join(bad))
        return cls(seed=utils.validate_seed(data['seed']),
                   ratios=validate_ratios(data['ratios']),
                   classes=tuple(data['classes']),
                   assignment=dict(data['assignment']))

    def save(self, path):
        utils.atomic_write(path, self.to_json())

    @classmethod
    def load(cls, path):
        with open(path, 'r', encoding='utf-8') as fp:
            return cls.from_json(fp.read())

    def check_index(self, index):
        """Verify that the split describes this dataset.

        :raises: DatasetError on class or file mismatch.
        """
        if tuple(index.classes) != tuple(self.classes):
            raise exceptions.DatasetError(
                _('Split classes %(split)s do not match dataset classes '
                  '%(data)s') % {'split': ', '.join(self.classes),
                                 'data': ', '.join(index.classes)})
        paths = {path for path, _label in index.entries}
        missing = sorted(set(self.assignment) - paths)
        if missing:
            raise exceptions.DatasetError(
                _('Split refers to files missing from the dataset'),
                missing)

    def select(self, index, tag):
        """Return the index entries assigned to the split tag."""
        if tag not in SPLITS:
            raise ValueError(_('Unknown split %s') % tag)
        self.check_index(index)
        return [(path, label) for path, label in index.entries
                if self.assignment.get(path) == tag]

    def counts(self, index):
        """Per-class counts: list of (class, train, val, test)."""
        table = collections.OrderedDict(
            (name, dict.fromkeys(SPLITS, 0)) for name in index.classes)
        for path, label in index.entries:
            tag = self.assignment.get(path)
            if tag is not None:
                table[index.classes[label]][tag] += 1
        return [(name,) + tuple(row[s] for s in SPLITS)
                for name, row in table.items()]


def split_dataset(index, ratios=DEFAULT_RATIOS, seed=0):
    """Stratified, seeded train/val/test assignment.

    Each class is shuffled with its own derived stream and cut into
    consecutive train, val and test parts.

    :returns: :py:class:`SplitSpec`.
    :raises: ConfigError for invalid ratios.
    """
    ratios = validate_ratios(ratios)
    seed = utils.validate_seed(seed)
    by_class = collections.defaultdict(list)
    for path, label in index.entries:
        by_class[label].append(path)

    assignment = {}
    for label in sorted(by_class):
        paths = by_class[label]
        rng = utils.derive_rng(seed, utils.SPLIT_STREAM, label)
        order = rng.permutation(len(paths))
        shares = apportion(len(paths), ratios)
        start = 0
        for tag, share in zip(SPLITS, shares):
            for k in order[start:start + share]:
                assignment[paths[k]] = tag
            start += share

    spec = SplitSpec(seed=seed, ratios=ratios, classes=tuple(index.classes),
                     assignment=dict(sorted(assignment.items())))
    totals = collections.Counter(spec.assignment.values())
    LOG.info('Split %(total)d images into %(train)d train, %(val)d '
             'validation and %(test)d test images',
             {'total': len(index), 'train': totals['train'],
              'val': totals['val'], 'test': totals['test']})
    return spec


class _PPMReader(object):
    """Tokenizer of the binary PPM header."""

    def __init__(self, data, path):
        self.data = data
        self.path = path
        self.pos = 2

    def fail(self, reason):
        raise exceptions.ImageDecodeError(self.path, reason)

    def token(self):
        data = self.data
        while self.pos < len(data):
            char = data[self.pos:self.pos + 1]
            if char == b'#':
                end = data.find(b'\n', self.pos)
                self.pos = len(data) if end < 0 else end + 1
            elif char in _WHITESPACE:
                self.pos += 1
            else:
                break
        start = self.pos
        while (self.pos < len(data) and
               data[self.pos:self.pos + 1] not in _WHITESPACE and
               data[self.pos:self.pos + 1] != b'#'):
            self.pos += 1
        value = data[start:self.pos]
        if not value:
            self.fail(_('truncated header'))
        if not value.isdigit():
            self.fail(_('invalid header token %r') % value)
        return int(value)


def _decode_ppm(data, path):
    reader = _PPMReader(data, path)
    width, height, maxval = reader.token(), reader.token(), reader.token()
    if width < 1 or height < 1:
        reader.fail(_('image dimensions must be positive'))
    if not 0 < maxval < 65536:
        reader.fail(_('maxval must be in [1, 65535], got %d') % maxval)
    if data[reader.pos:reader.pos + 1] not in _WHITESPACE or \
            reader.pos >= len(data):
        reader.fail(_('missing whitespace after header'))
    offset = reader.pos + 1
    dtype = np.dtype('>u2') if maxval > 255 else np.dtype('u1')
    expected = width * height * 3 * dtype.itemsize
    payload = data[offset:offset + expected]
    if len(payload) < expected:
        reader.fail(_('truncated pixel data: %(real)d of %(expected)d '
                      'bytes') % {'real': len(payload),
                                  'expected': expected})
    values = np.frombuffer(payload, dtype=dtype).reshape(height, width, 3)
    if values.max() > maxval:
        reader.fail(_('sample exceeds maxval %d') % maxval)
    return (values.astype(np.float64) / maxval).astype(np.float32)


def _decode_png(path):
    try:
        values = skio.imread(path)
    except Exception as exc:
        raise exceptions.ImageDecodeError(path, str(exc))
    if values.dtype == np.uint8:
        pixels = values.astype(np.float64) / 255.0
    elif values.dtype == np.uint16:
        pixels = values.astype(np.float64) / 65535.0
    elif values.dtype == np.bool_:
        pixels = values.astype(np.float64)
    else:
        raise exceptions.ImageDecodeError(
            path, _('unsupported sample type %s') % values.dtype)
    if pixels.ndim == 2:
        pixels = np.stack([pixels] * 3, axis=-1)
    elif pixels.ndim == 3 and pixels.shape[2] in (1, 2):
        pixels = np.repeat(pixels[:, :, :1], 3, axis=2)
    elif pixels.ndim == 3 and pixels.shape[2] == 4:
        pixels = pixels[:, :, :3]
    elif pixels.ndim != 3 or pixels.shape[2] != 3:
        raise exceptions.ImageDecodeError(
            path, _('unsupported image shape %s') % (values.shape,))
    return pixels.astype(np.float32)


def decode_image(path):
    """Decode a binary PPM (P6) or PNG file.

    :returns: H x W x 3 float32 array in [0, 1], a sample value v of a PPM
        with maximum value m is mapped to v / m.
    :raises: ImageDecodeError for truncated or unsupported files.
    """
    try:
        with open(path, 'rb') as fp:
            data = fp.read()
    except OSError as exc:
        raise exceptions.ImageDecodeError(path, exc.strerror or str(exc))
    if data[:2] == b'P6':
        return _decode_ppm(data, path)
    elif data[:8] == _PNG_SIGNATURE:
        return _decode_png(path)
    raise exceptions.ImageDecodeError(path, _('unknown image format'))


def _check_pixels(pixels):
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise exceptions.ShapeError(_('Expected H x W x 3 pixels'),
                                    pixels.shape)
    return pixels


def encode_ppm(pixels, path):
    """Write pixels in [0, 1] as a binary PPM with maxval 255."""
    pixels = _check_pixels(pixels)
    values = np.rint(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    header = b'P6\n%d %d\n255\n' % (pixels.shape[1], pixels.shape[0])
    utils.atomic_write(path, header + values.tobytes())


def resize(pixels, out_h, out_w):
    """Bilinear resize with half-pixel centers, output clipped to [0, 1]."""
    pixels = _check_pixels(pixels)
    if out_h < 1 or out_w < 1:
        raise ValueError(_('Output dimensions must be positive'))
    if pixels.shape[:2] == (out_h, out_w):
        return pixels.astype(np.float32, copy=True)
    out = transform.resize(pixels, (out_h, out_w), order=1, mode='edge',
                           anti_aliasing=False, preserve_range=True)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def to_grayscale(pixels):
    """Luma of H x W x 3 pixels as an H x W array."""
    pixels = _check_pixels(pixels)
    return pixels @ np.array(functional.LUMA_WEIGHTS)


@dataclasses.dataclass
class AugmentationSpec:
    """Ranges of the random affine augmentation.

    Rotation and shear are drawn uniformly from [-max, max] degrees, shifts
    from [-max, max] fractions of the image size, zoom from
    [1 - max, 1 + max], and the horizontal flip with probability
    ``hflip_prob``.
    """
    rotation_deg_max: float = 20.0
    shift_frac_max: float = 0.1
    shear_deg_max: float = 10.0
    zoom_frac_max: float = 0.1
    hflip_prob: float = 0.5

    def validate(self):
        violations = []
        for field in dataclasses.fields(self):
            value = getattr(self, field.name)
            if not isinstance(value, (int, float)) or value < 0:
                violations.append(_('%s must be a non-negative number') %
                                  field.name)
        if not violations:
            if self.hflip_prob > 1:
                violations.append(_('hflip_prob must be in [0, 1]'))
            if self.zoom_frac_max >= 1:
                violations.append(_('zoom_frac_max must be below 1'))
        if violations:
            raise exceptions.ConfigError(violations)
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data, section='augmentation'):
        data = utils.check_keys(data, [f.name for f in dataclasses.fields(
            cls)], section)
        return cls(**data).validate()

    def sample(self, rng):
        """Draw transform parameters for :py:func:`affine_transform`.

        Always consumes the same number of values from rng.
        """
        rotation = rng.uniform(-1.0, 1.0) * self.rotation_deg_max
        shift = tuple(rng.uniform(-1.0, 1.0, size=2) * self.shift_frac_max)
        shear = rng.uniform(-1.0, 1.0) * self.shear_deg_max
        zoom = 1.0 + rng.uniform(-1.0, 1.0) * self.zoom_frac_max
        hflip = bool(rng.random() < self.hflip_prob)
        return {'rotation_deg': rotation, 'shift': shift,
                'shear_deg': shear, 'zoom': zoom, 'hflip': hflip}


def affine_transform(pixels, rotation_deg=0.0, shift=(0.0, 0.0),
                     shear_deg=0.0, zoom=1.0, hflip=False):
    """Apply a horizontal flip and an affine warp around the image center.

    Bilinear resampling; pixels mapped from outside the source are 0.

    :param shift: (x, y) translation as fractions of width and height.
    :param zoom: scale factor, 1 keeps the size.
    """
    pixels = _check_pixels(pixels)
    if hflip:
        pixels = pixels[:, ::-1]
    if (rotation_deg == 0 and shear_deg == 0 and zoom == 1
            and tuple(shift) == (0, 0)):
        return np.array(pixels, dtype=np.float32)

    height, width = pixels.shape[:2]
    center = np.array([(width - 1) / 2.0, (height - 1) / 2.0])
    offset = np.array(shift, dtype=np.float64) * [width, height]
    tform = (transform.AffineTransform(translation=-center) +
             transform.AffineTransform(scale=(zoom, zoom),
                                       rotation=math.radians(rotation_deg),
                                       shear=math.radians(shear_deg)) +
             transform.AffineTransform(translation=center + offset))
    out = transform.warp(pixels, tform.inverse, order=1, mode='constant',
                         cval=0.0, preserve_range=True)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def augment(sample, spec, rng):
    """Return a randomly transformed copy of sample, label unchanged."""
    params = spec.sample(rng)
    return ImageSample(pixels=affine_transform(sample.pixels, **params),
                       label=sample.label, source_path=sample.source_path)


def normalize(pixels):
    """Map pixels in [0, 1] to [-1, 1] as an NCHW tensor.

    :param pixels: H x W x 3 array or N x H x W x 3 batch.
    """
    pixels = np.asarray(pixels, dtype=np.float32)
    if pixels.ndim == 3:
        pixels = pixels[None]
    if pixels.ndim != 4 or pixels.shape[3] != 3:
        raise exceptions.ShapeError(_('Expected [N,] H x W x 3 pixels'),
                                    pixels.shape)
    return Tensor((pixels.transpose(0, 3, 1, 2) - 0.5) / 0.5)


def denormalize(tensor):
    """Inverse of :py:func:`normalize`, returns N x H x W x 3 pixels."""
    return tensor.data.transpose(0, 2, 3, 1) * 0.5 + 0.5


class BackgroundRemovalHook(object):
    """Runs an external segmentation executable on every image.

    The executable is called as ``executable <in.ppm> <out.ppm>`` and must
    write an image of any supported format to the output path.
    """

    def __init__(self, executable):
        self.executable = executable

    def __call__(self, pixels, source=None):
        with tempfile.TemporaryDirectory(prefix='ewastenet-') as tmpdir:
            src = os.path.join(tmpdir, 'in.ppm')
            dst = os.path.join(tmpdir, 'out.ppm')
            encode_ppm(pixels, src)
            try:
                processutils.execute(self.executable, src, dst)
            except (processutils.ProcessExecutionError, OSError) as exc:
                raise exceptions.DatasetError(
                    _('Background removal with %(exe)s failed for '
                      '%(src)s: %(error)s') %
                    {'exe': self.executable, 'src': source or '<memory>',
                     'error': exc})
            return decode_image(dst)


class ImageDataset(object):
    """Decoded, resized and optionally augmented samples of one split.

    Augmentation of sample ``i`` in epoch ``e`` uses the generator derived
    from ``(seed, e, i)``, so batches do not depend on which worker
    produced them.

    :param index: :py:class:`DatasetIndex` the entries belong to.
    :param entries: list of (relative path, label).
    :param image_size: (height, width) samples are resized to.
    :param augmentation: :py:class:`AugmentationSpec` or None.
    :param hook: callable applied to decoded pixels before resizing.
    :param workers: size of the decoding thread pool.
    """

    def __init__(self, index, entries, image_size, augmentation=None,
                 seed=0, hook=None, workers=2):
        self.index = index
        self.entries = list(entries)
        self.image_size = tuple(image_size)
        self.augmentation = augmentation
        self.seed = utils.validate_seed(seed)
        self.hook = hook
        self.workers = max(1, int(workers))
        self._cache = {}
        self._lock = threading.Lock()

    def __len__(self):
        return len(self.entries)

    @property
    def labels(self):
        return np.array([label for _path, label in self.entries],
                        dtype=np.int64)

    def load(self, i):
        """Decoded and resized sample i, cached."""
        with self._lock:
            cached = self._cache.get(i)
        if cached is not None:
            return cached
        path, label = self.entries[i]
        pixels = decode_image(self.index.path(path))
        if self.hook is not None:
            pixels = self.hook(pixels, source=path)
        pixels = resize(pixels, *self.image_size)
        sample = ImageSample(pixels=pixels, label=label, source_path=path)
        with self._lock:
            self._cache[i] = sample
        return sample

    def sample(self, i, epoch=0, augment_sample=False):
        sample = self.load(i)
        if augment_sample and self.augmentation is not None:
            rng = utils.derive_rng(self.seed, utils.AUGMENT_STREAM, epoch, i)
            sample = augment(sample, self.augmentation, rng)
        return sample

    def order(self, epoch=0, shuffle=False):
        if not shuffle:
            return np.arange(len(self))
        rng = utils.derive_rng(self.seed, utils.SHUFFLE_STREAM, epoch)
        return rng.permutation(len(self))

    def batches(self, batch_size, epoch=0, shuffle=False, augment=False,
                prefetch=2):
        """Yield (images, labels, indices) mini-batches.

        :param batch_size: maximum number of samples per batch, the last
            batch may be smaller.
        :returns: generator of (NCHW Tensor, int64 labels array, indices
            array).
        """
        if batch_size < 1:
            raise ValueError(_('batch_size must be positive'))
        order = self.order(epoch, shuffle)
        chunks = [order[k:k + batch_size]
                  for k in range(0, len(order), batch_size)]
        with concurrent.futures.ThreadPoolExecutor(
                max_workers=self.workers) as executor:
            pending = collections.deque()

            def submit(chunk):
                pending.append((chunk, [
                    executor.submit(self.sample, int(i), epoch, augment)
                    for i in chunk]))

            for chunk in chunks[:prefetch]:
                submit(chunk)
            for next_chunk in chunks[prefetch:] + [None] * prefetch:
                if not pending:
                    break
                chunk, futures = pending.popleft()
                samples = [future.result() for future in futures]
                if next_chunk is not None:
                    submit(next_chunk)
                yield (normalize(np.stack([s.pixels for s in samples])),
                       np.array([s.label for s in samples], dtype=np.int64),
                       np.asarray(chunk))
