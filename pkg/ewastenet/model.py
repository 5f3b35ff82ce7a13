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

"""The two-stream EWasteNet classifier.

Edge stream: luma -> Sobel -> 3x3 conv adapter -> DeiT.
Pyramid stream: ASPP -> CBAM -> 3x3 conv adapter -> DeiT.
Head: concatenated stream features -> MLP -> softmax.

Both streams receive the same normalized image.
"""

import collections
import dataclasses
import logging
import math

import numpy as np

from ewastenet.common import exceptions
from ewastenet.common.i18n import _
from ewastenet.common import utils
from ewastenet import deit
from ewastenet import functional as F
from ewastenet import parameters
from ewastenet import tensor


LOG = logging.getLogger(__name__)

SOBEL_X = np.array([[-1.0, 0.0, 1.0],
                    [-2.0, 0.0, 2.0],
                    [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T
SOBEL_MODES = ('gx_gy', 'gx_only')
CBAM_ORDERS = ('spatial_first', 'channel_first')
ADAPTER_CHANNELS = 3
PARAMETER_BUDGET = 1000000

GROUPS = ('edge.sobel', 'edge.adapter', 'edge.deit', 'pyramid.aspp',
          'pyramid.cbam', 'pyramid.adapter', 'pyramid.deit', 'head')
"""Parameter groups in construction order."""


def _tuple(value):
    return tuple(value) if isinstance(value, (list, tuple)) else value


@dataclasses.dataclass
class ASPPConfig:
    branch_dilations: tuple = (1, 2, 3, 4, 5)
    branch_filters: tuple = (64, 32, 16, 8, 4)
    kernel_size: int = 3

    @property
    def out_channels(self):
        return sum(self.branch_filters)

    def validate(self):
        violations = []
        if len(self.branch_dilations) != len(self.branch_filters):
            violations.append(_('ASPP dilations and filters must have the '
                                'same length'))
        if not self.branch_filters:
            violations.append(_('ASPP needs at least one branch'))
        if any(v < 1 for v in tuple(self.branch_dilations) +
               tuple(self.branch_filters)):
            violations.append(_('ASPP dilations and filters must be '
                                'positive'))
        if self.kernel_size < 1 or self.kernel_size % 2 != 1:
            violations.append(_('ASPP kernel_size must be odd'))
        if violations:
            raise exceptions.ConfigError(violations)
        return self


@dataclasses.dataclass
class CBAMConfig:
    channel_reduction: int = 4
    spatial_kernel: int = 7
    order: str = 'spatial_first'

    def validate(self, channels=None):
        violations = []
        if self.channel_reduction < 1:
            violations.append(_('CBAM channel_reduction must be positive'))
        elif channels is not None and channels % self.channel_reduction:
            violations.append(
                _('CBAM channel_reduction %(r)d must divide the attended '
                  'channel count %(c)d') % {'r': self.channel_reduction,
                                            'c': channels})
        if self.spatial_kernel < 1 or self.spatial_kernel % 2 != 1:
            violations.append(_('CBAM spatial_kernel must be odd'))
        if self.order not in CBAM_ORDERS:
            violations.append(_('CBAM order must be one of %s') %
                              ', '.join(CBAM_ORDERS))
        if violations:
            raise exceptions.ConfigError(violations)
        return self


@dataclasses.dataclass
class FusionMLPConfig:
    layer_sizes: tuple = (512, 256, 256)
    dropout_rates: tuple = (0.3, 0.2)
    num_classes: int = 8

    def validate(self):
        violations = []
        if not self.layer_sizes or any(s < 1 for s in self.layer_sizes):
            violations.append(_('fusion layer_sizes must be positive'))
        if len(self.dropout_rates) >= max(len(self.layer_sizes), 1):
            violations.append(_('fusion head takes fewer dropout rates '
                                'than hidden layers'))
        if any(not 0 <= p < 1 for p in self.dropout_rates):
            violations.append(_('dropout rates must be in [0, 1)'))
        if self.num_classes < 2:
            violations.append(_('num_classes must be at least 2'))
        if violations:
            raise exceptions.ConfigError(violations)
        return self


@dataclasses.dataclass
class EWasteNetConfig:
    """Architecture hyperparameters.

    ``image_h`` and ``image_w`` are the working resolution every image is
    resized to; both backbones must be configured for the same size.
    """
    image_h: int = 64
    image_w: int = 64
    backbone: deit.DeiTConfig = dataclasses.field(
        default_factory=deit.DeiTConfig)
    aspp: ASPPConfig = dataclasses.field(default_factory=ASPPConfig)
    cbam: CBAMConfig = dataclasses.field(default_factory=CBAMConfig)
    fusion: FusionMLPConfig = dataclasses.field(
        default_factory=FusionMLPConfig)
    sobel_mode: str = 'gx_gy'

    @property
    def sobel_channels(self):
        return 2 if self.sobel_mode == 'gx_gy' else 1

    def validate(self):
        violations = []
        if self.sobel_mode not in SOBEL_MODES:
            violations.append(_('sobel_mode must be one of %s') %
                              ', '.join(SOBEL_MODES))
        if (self.backbone.image_h, self.backbone.image_w) != (
                self.image_h, self.image_w):
            violations.append(
                _('backbone image size %(bh)dx%(bw)d differs from the model '
                  'image size %(h)dx%(w)d') % {
                    'bh': self.backbone.image_h,
                    'bw': self.backbone.image_w,
                    'h': self.image_h, 'w': self.image_w})
        if self.backbone.input_channels != ADAPTER_CHANNELS:
            violations.append(_('backbone input_channels must be %d') %
                              ADAPTER_CHANNELS)
        if violations:
            raise exceptions.ConfigError(violations)
        self.backbone.validate()
        self.aspp.validate()
        self.cbam.validate(self.aspp.out_channels)
        self.fusion.validate()
        return self

    def to_dict(self):
        result = dataclasses.asdict(self)
        for section in ('aspp', 'fusion'):
            result[section] = {k: list(v) if isinstance(v, tuple) else v
                               for k, v in result[section].items()}
        return result

    @classmethod
    def from_dict(cls, data, section='model'):
        """Build a configuration from a mapping, missing keys defaulted.

        The backbone image size follows the model image size unless set.
        """
        data = dict(utils.check_keys(
            data, [f.name for f in dataclasses.fields(cls)], section))
        kwargs = {k: v for k, v in data.items()
                  if k in ('image_h', 'image_w', 'sobel_mode')}
        image_h = kwargs.get('image_h', cls.image_h)
        image_w = kwargs.get('image_w', cls.image_w)
        backbone = data.get('backbone') or {}
        if isinstance(backbone, dict):
            backbone = dict({'image_h': image_h, 'image_w': image_w},
                            **backbone)
        kwargs['backbone'] = deit.DeiTConfig.from_dict(
            backbone, section + '.backbone')
        for name, klass in (('aspp', ASPPConfig), ('cbam', CBAMConfig),
                            ('fusion', FusionMLPConfig)):
            values = utils.check_keys(
                data.get(name), [f.name for f in dataclasses.fields(klass)],
                '%s.%s' % (section, name))
            kwargs[name] = klass(**{k: _tuple(v) for k, v in values.items()})
        return cls(**kwargs)


def toy_config():
    """Small configuration used by gradient checks and quick tests."""
    return EWasteNetConfig(
        image_h=16, image_w=16,
        backbone=deit.DeiTConfig(patch_size=8, embed_dim=16, depth=1,
                                 num_heads=2, image_h=16, image_w=16),
        aspp=ASPPConfig(branch_filters=(4, 2, 2, 1, 1)),
        cbam=CBAMConfig(channel_reduction=2))


def sobel_kernel(mode='gx_gy'):
    """Fixed Sobel kernel bank, [2, 1, 3, 3] (gx, gy) or [1, 1, 3, 3]."""
    if mode not in SOBEL_MODES:
        raise ValueError(_('Unknown Sobel mode %s') % mode)
    bank = [SOBEL_X, SOBEL_Y] if mode == 'gx_gy' else [SOBEL_X]
    return np.stack(bank)[:, None]


# Parameter construction


def _init_conv(params, name, out_ch, in_ch, kernel, rng):
    fan_in = in_ch * kernel * kernel
    bound = 1.0 / math.sqrt(fan_in)
    params.add(name + '.weight',
               rng.uniform(-bound, bound, (out_ch, in_ch, kernel, kernel)))
    params.add(name + '.bias', np.zeros(out_ch))


def _init_edge(params, cfg, rng):
    params.add('edge.sobel.kernel', sobel_kernel(cfg.sobel_mode),
               constant=True)
    _init_conv(params, 'edge.adapter', ADAPTER_CHANNELS, cfg.sobel_channels,
               3, rng)
    deit.init_backbone(params, cfg.backbone, rng, 'edge.deit')


def _init_pyramid(params, cfg, rng):
    for k, filters in enumerate(cfg.aspp.branch_filters):
        _init_conv(params, 'pyramid.aspp.branch%d' % k, filters,
                   ADAPTER_CHANNELS, cfg.aspp.kernel_size, rng)
    channels = cfg.aspp.out_channels
    hidden = channels // cfg.cbam.channel_reduction
    deit.init_linear(params, 'pyramid.cbam.channel.fc1', channels, hidden,
                     rng)
    deit.init_linear(params, 'pyramid.cbam.channel.fc2', hidden, channels,
                     rng)
    _init_conv(params, 'pyramid.cbam.spatial', 1, 2, cfg.cbam.spatial_kernel,
               rng)
    _init_conv(params, 'pyramid.adapter', ADAPTER_CHANNELS, channels, 3, rng)
    deit.init_backbone(params, cfg.backbone, rng, 'pyramid.deit')


def _init_head(params, cfg, rng):
    width = 2 * cfg.backbone.embed_dim
    for i, size in enumerate(cfg.fusion.layer_sizes):
        deit.init_linear(params, 'head.fc%d' % i, width, size, rng)
        width = size
    deit.init_linear(params, 'head.classifier', width,
                     cfg.fusion.num_classes, rng)


def analytic_parameter_count(cfg):
    """Closed-form element count per parameter group.

    :returns: OrderedDict of group name to count, in :py:data:`GROUPS`
        order.
    """
    def conv(out_ch, in_ch, kernel):
        return out_ch * in_ch * kernel * kernel + out_ch

    channels = cfg.aspp.out_channels
    hidden = channels // cfg.cbam.channel_reduction
    head, width = 0, 2 * cfg.backbone.embed_dim
    for size in cfg.fusion.layer_sizes:
        head += width * size + size
        width = size
    head += width * cfg.fusion.num_classes + cfg.fusion.num_classes
    backbone = deit.backbone_parameter_count(cfg.backbone)
    return collections.OrderedDict([
        ('edge.sobel', cfg.sobel_channels * 9),
        ('edge.adapter', conv(ADAPTER_CHANNELS, cfg.sobel_channels, 3)),
        ('edge.deit', backbone),
        ('pyramid.aspp', sum(conv(f, ADAPTER_CHANNELS, cfg.aspp.kernel_size)
                             for f in cfg.aspp.branch_filters)),
        ('pyramid.cbam', (channels * hidden + hidden) +
         (hidden * channels + channels) + conv(1, 2,
                                               cfg.cbam.spatial_kernel)),
        ('pyramid.adapter', conv(ADAPTER_CHANNELS, channels, 3)),
        ('pyramid.deit', backbone),
        ('head', head),
    ])


def parameter_group(name):
    parts = name.split('.')
    return parts[0] if parts[0] == 'head' else '.'.join(parts[:2])


def parameter_table(params):
    """Per-group element counts: list of (group, trainable, frozen)."""
    table = collections.OrderedDict((group, [0, 0]) for group in GROUPS)
    for name, t in params.items():
        row = table.setdefault(parameter_group(name), [0, 0])
        row[1 if params.is_frozen(name) else 0] += t.size
    return [(group, trainable, frozen)
            for group, (trainable, frozen) in table.items()]


def count_trainable_parameters(params):
    """Return (trainable, frozen) element counts."""
    return params.count()


def freeze_backbones(params, frozen=True):
    """Toggle the frozen flag of both DeiT backbones."""
    return sum(params.set_frozen(prefix, frozen)
               for prefix in ('edge.deit', 'pyramid.deit'))


# Forward functions


def sobel_apply(gray, kernel=None):
    """Sobel gradients of a single-channel image.

    Cross-correlation with the fixed kernels after replicating the border
    pixels, so a constant image gives exactly zero everywhere.

    :param gray: [N, 1, H, W] tensor.
    :param kernel: kernel bank tensor, defaults to gx and gy.
    :returns: [N, K, H, W] with channel 0 = gx and channel 1 = gy.
    :raises: ShapeError for multi-channel input.
    """
    if gray.ndim != 4 or gray.shape[1] != 1:
        raise exceptions.ShapeError(
            _('Sobel expects single-channel [N, 1, H, W] input'),
            gray.shape)
    if kernel is None:
        kernel = tensor.Tensor(sobel_kernel())
    return F.conv2d(F.pad(gray, 1, mode='edge'), kernel, padding='valid')


def edge_stream_forward(image, params, cfg):
    """Edge stream features [N, D] of normalized [N, 3, H, W] images."""
    edges = sobel_apply(F.luma(image), params['edge.sobel.kernel'])
    adapted = F.conv2d(edges, params['edge.adapter.weight'],
                       bias=params['edge.adapter.bias'])
    return deit.deit_forward(adapted, cfg.backbone, params.scope('edge.deit'))


def aspp_forward(x, params, cfg):
    """Parallel dilated 3x3 convolutions with ReLU, concatenated.

    :param params: scope holding ``branch{k}`` convolutions.
    :param cfg: :py:class:`ASPPConfig`.
    """
    branches = []
    for k, dilation in enumerate(cfg.branch_dilations):
        branch = params.scope('branch%d' % k)
        branches.append(F.relu(F.conv2d(x, branch['weight'],
                                        bias=branch['bias'],
                                        dilation=dilation)))
    return F.concat(branches, axis=1)


def _channel_gate(x, params):
    n, c = x.shape[:2]

    # Shared MLP over [N, C, 1, 1] descriptors.
    def mlp(v):
        hidden = F.relu(F.linear(F.reshape(v, (n, c)), params['fc1.weight'],
                                 params['fc1.bias']))
        out = F.linear(hidden, params['fc2.weight'], params['fc2.bias'])
        return F.reshape(out, (n, c, 1, 1))

    return F.sigmoid(F.add(mlp(F.pool_global(x, 'avg', 'spatial')),
                           mlp(F.pool_global(x, 'max', 'spatial'))))


def _spatial_gate(x, params):
    pooled = F.concat([F.pool_global(x, 'avg', 'channel'),
                       F.pool_global(x, 'max', 'channel')], axis=1)
    return F.sigmoid(F.conv2d(pooled, params['weight'], bias=params['bias']))


def cbam_forward(x, params, cfg, return_gates=False):
    """Convolutional block attention: spatial and channel gating.

    The second gate is computed from the output of the first one.

    :param params: scope holding ``channel.fc1``, ``channel.fc2`` and
        ``spatial``.
    :param cfg: :py:class:`CBAMConfig`.
    :param return_gates: also return the ([N, 1, H, W] spatial,
        [N, C, 1, 1] channel) gates.
    """
    if x.ndim != 4 or x.shape[1] % cfg.channel_reduction:
        raise exceptions.ShapeError(
            _('CBAM channel count must be divisible by %d') %
            cfg.channel_reduction, x.shape)
    if cfg.order == 'spatial_first':
        spatial = _spatial_gate(x, params.scope('spatial'))
        out = F.mul(x, spatial)
        channel = _channel_gate(out, params.scope('channel'))
        out = F.mul(out, channel)
    else:
        channel = _channel_gate(x, params.scope('channel'))
        out = F.mul(x, channel)
        spatial = _spatial_gate(out, params.scope('spatial'))
        out = F.mul(out, spatial)
    if return_gates:
        return out, spatial, channel
    return out


def pyramid_stream_forward(image, params, cfg):
    """Pyramid stream features [N, D] of normalized [N, 3, H, W] images."""
    pyramid = aspp_forward(image, params.scope('pyramid.aspp'), cfg.aspp)
    attended = cbam_forward(pyramid, params.scope('pyramid.cbam'), cfg.cbam)
    adapted = F.conv2d(attended, params['pyramid.adapter.weight'],
                       bias=params['pyramid.adapter.bias'])
    return deit.deit_forward(adapted, cfg.backbone,
                             params.scope('pyramid.deit'))


def fusion_logits(f1, f2, params, cfg, training=False, rng=None):
    """Class logits of the fusion head (before the softmax)."""
    if f1.shape != f2.shape:
        raise exceptions.ShapeError(_('Stream features differ in shape'),
                                    f1.shape, f2.shape)
    x = F.concat([f1, f2], axis=1)
    for i in range(len(cfg.layer_sizes)):
        x = F.relu(F.linear(x, params['fc%d.weight' % i],
                            params['fc%d.bias' % i]))
        if i < len(cfg.dropout_rates):
            x = F.dropout(x, cfg.dropout_rates[i], training, rng)
    return F.linear(x, params['classifier.weight'],
                    params['classifier.bias'])


def fusion_head_forward(f1, f2, params, cfg, training=False, rng=None):
    """Class probabilities [N, num_classes] from two stream features."""
    return F.softmax(fusion_logits(f1, f2, params, cfg, training, rng),
                     axis=-1)


class EWasteNet(object):
    """A configured model bound to its parameters.

    :ivar cfg: :py:class:`EWasteNetConfig`.
    :ivar params: :py:class:`ewastenet.parameters.ModelParameters`.
    """

    def __init__(self, cfg, params):
        self.cfg = cfg
        self.params = params

    def with_params(self, params):
        return EWasteNet(self.cfg, params)

    def features(self, images):
        return (edge_stream_forward(images, self.params, self.cfg),
                pyramid_stream_forward(images, self.params, self.cfg))

    def logits(self, images, training=False, rng=None):
        edge, pyramid = self.features(images)
        return fusion_logits(edge, pyramid, self.params.scope('head'),
                             self.cfg.fusion, training, rng)

    def forward(self, images, training=False, rng=None):
        """Class probabilities [N, num_classes] of normalized images."""
        return F.softmax(self.logits(images, training, rng), axis=-1)

    __call__ = forward

    def loss(self, images, labels, training=False, rng=None):
        """Mean cross-entropy, computed from the logits."""
        return F.cross_entropy(self.logits(images, training, rng), labels)

    def predict(self, images):
        """Probabilities as a numpy array, without recording a graph."""
        with tensor.no_grad():
            return self.forward(images).numpy()

    def count_trainable_parameters(self):
        return count_trainable_parameters(self.params)


def build_model(cfg=None, seed=0):
    """Construct EWasteNet with freshly initialized parameters.

    Parameters are drawn from one generator derived from seed in a fixed
    order (edge stream, pyramid stream, head), so the same seed gives
    bit-identical parameters.

    :raises: ConfigError listing violated invariants.
    """
    cfg = (cfg or EWasteNetConfig()).validate()
    rng = utils.derive_rng(seed, utils.INIT_STREAM)
    params = parameters.ModelParameters()
    _init_edge(params, cfg, rng)
    _init_pyramid(params, cfg, rng)
    _init_head(params, cfg, rng)
    trainable, frozen = params.count()
    LOG.info('Built EWasteNet with %(trainable)d trainable and %(frozen)d '
             'frozen parameters', {'trainable': trainable,
                                   'frozen': frozen})
    return EWasteNet(cfg, params)
