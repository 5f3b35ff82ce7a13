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

"""Small data-efficient image transformer backbone.

The token sequence is ``[class, distillation, patch_1 ... patch_P]`` plus a
learned positional embedding, processed by pre-norm encoder blocks. The
feature of an image is the class token after the final layer norm; the
distillation token takes part in attention but has no head.

Parameter names below a backbone prefix::

    patch_embed.weight [D, C, p, p]    patch_embed.bias [D]
    cls_token [1, 1, D]                dist_token [1, 1, D]
    pos_embed [1, P + 2, D]
    block{i}.norm1.gamma / .beta       block{i}.attn.qkv.weight [D, 3D]
    block{i}.attn.proj.weight [D, D]   block{i}.norm2.gamma / .beta
    block{i}.mlp.fc1.weight [D, H]     block{i}.mlp.fc2.weight [H, D]
    norm.gamma / norm.beta

Linear weights are stored [in, out], every linear layer has a bias.
"""

import dataclasses
import logging
import math

import numpy as np
from scipy import stats

from ewastenet.common import exceptions
from ewastenet.common.i18n import _
from ewastenet.common import utils
from ewastenet import functional as F


LOG = logging.getLogger(__name__)

TOKEN_INIT_STD = 0.02


@dataclasses.dataclass
class DeiTConfig:
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0
    input_channels: int = 3
    image_h: int = 64
    image_w: int = 64
    layer_norm_eps: float = 1e-6

    @property
    def num_patches(self):
        return (self.image_h // self.patch_size) * (
            self.image_w // self.patch_size)

    @property
    def num_tokens(self):
        return self.num_patches + 2

    @property
    def hidden_dim(self):
        return int(round(self.embed_dim * self.mlp_ratio))

    @property
    def head_dim(self):
        return self.embed_dim // self.num_heads

    def validate(self):
        """Check the invariants, listing every violation.

        :raises: ConfigError
        """
        violations = []
        for name in ('patch_size', 'embed_dim', 'depth', 'num_heads',
                     'input_channels', 'image_h', 'image_w'):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) \
                    or value < 1:
                violations.append(_('%s must be a positive integer') % name)
        if violations:
            raise exceptions.ConfigError(violations)
        if self.image_h % self.patch_size or self.image_w % self.patch_size:
            violations.append(
                _('image size %(h)dx%(w)d must be divisible by the patch '
                  'size %(p)d') % {'h': self.image_h, 'w': self.image_w,
                                   'p': self.patch_size})
        if self.embed_dim % self.num_heads:
            violations.append(
                _('embed_dim %(d)d must be divisible by num_heads %(h)d') %
                {'d': self.embed_dim, 'h': self.num_heads})
        if not self.mlp_ratio > 0 or self.hidden_dim < 1:
            violations.append(_('mlp_ratio must be positive'))
        if not self.layer_norm_eps >= 0:
            violations.append(_('layer_norm_eps must be non-negative'))
        if violations:
            raise exceptions.ConfigError(violations)
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data, section='model.backbone'):
        data = utils.check_keys(data, [f.name for f in dataclasses.fields(
            cls)], section)
        return cls(**data)


def backbone_parameter_count(cfg):
    """Closed-form number of parameters of one backbone."""
    d, h, c, p = cfg.embed_dim, cfg.hidden_dim, cfg.input_channels, \
        cfg.patch_size
    patch = d * c * p * p + d
    tokens = 2 * d + cfg.num_tokens * d
    block = (2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d
             + (d * h + h) + (h * d + d))
    return patch + tokens + cfg.depth * block + 2 * d


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


def _trunc_normal(rng, shape):
    return stats.truncnorm.rvs(-2.0, 2.0, scale=TOKEN_INIT_STD, size=shape,
                               random_state=rng)


def init_linear(params, name, fan_in, fan_out, rng):
    params.add(name + '.weight', _uniform(rng, (fan_in, fan_out), fan_in))
    params.add(name + '.bias', np.zeros(fan_out))


def init_layer_norm(params, name, dim):
    params.add(name + '.gamma', np.ones(dim))
    params.add(name + '.beta', np.zeros(dim))


def init_backbone(params, cfg, rng, prefix):
    """Add the parameters of one backbone under prefix.

    Tensors are drawn from rng in registration order.
    """
    cfg.validate()
    d, c, p = cfg.embed_dim, cfg.input_channels, cfg.patch_size
    scope = params.scope(prefix)
    params.add(scope.name('patch_embed.weight'),
               _uniform(rng, (d, c, p, p), c * p * p))
    params.add(scope.name('patch_embed.bias'), np.zeros(d))
    params.add(scope.name('cls_token'), _trunc_normal(rng, (1, 1, d)))
    params.add(scope.name('dist_token'), _trunc_normal(rng, (1, 1, d)))
    params.add(scope.name('pos_embed'),
               _trunc_normal(rng, (1, cfg.num_tokens, d)))
    for i in range(cfg.depth):
        block = scope.scope('block%d' % i)
        init_layer_norm(params, block.name('norm1'), d)
        init_linear(params, block.name('attn.qkv'), d, 3 * d, rng)
        init_linear(params, block.name('attn.proj'), d, d, rng)
        init_layer_norm(params, block.name('norm2'), d)
        init_linear(params, block.name('mlp.fc1'), d, cfg.hidden_dim, rng)
        init_linear(params, block.name('mlp.fc2'), cfg.hidden_dim, d, rng)
    init_layer_norm(params, scope.name('norm'), d)
    LOG.debug('Initialized backbone %(prefix)s with %(count)d parameters',
              {'prefix': prefix, 'count': backbone_parameter_count(cfg)})


def patch_embed(image, cfg, params):
    """Project non-overlapping patches to tokens, [N, C, H, W] -> [N, P, D].

    :raises: ShapeError if the image does not match the configuration.
    """
    if image.ndim != 4 or image.shape[1] != cfg.input_channels:
        raise exceptions.ShapeError(
            _('Backbone expects %d input channels') % cfg.input_channels,
            image.shape)
    height, width = image.shape[2:]
    if height % cfg.patch_size or width % cfg.patch_size:
        raise exceptions.ShapeError(
            _('Image dimensions must be divisible by the patch size %d') %
            cfg.patch_size, image.shape)
    out = F.conv2d(image, params['patch_embed.weight'],
                   bias=params['patch_embed.bias'], stride=cfg.patch_size,
                   padding='valid')
    n, d = out.shape[:2]
    return F.transpose(F.reshape(out, (n, d, -1)), (0, 2, 1))


def multi_head_attention(x, params, heads, return_weights=False):
    """Scaled dot-product self-attention over [N, T, D] tokens.

    :param params: scope holding ``qkv`` and ``proj`` linear layers.
    :param return_weights: also return the [N, heads, T, T] attention
        weights.
    """
    n, t, d = x.shape
    if d % heads:
        raise exceptions.ShapeError(
            _('Embedding dimension must be divisible by %d heads') % heads,
            x.shape)
    head_dim = d // heads
    qkv = F.linear(x, params['qkv.weight'], params['qkv.bias'])
    qkv = F.transpose(F.reshape(qkv, (n, t, 3, heads, head_dim)),
                      (2, 0, 3, 1, 4))
    q, k, v = (F.slice_(qkv, (i,)) for i in range(3))
    scores = F.scale(F.matmul(q, F.transpose(k, (0, 1, 3, 2))),
                     1.0 / math.sqrt(head_dim))
    weights = F.softmax(scores, axis=-1)
    out = F.transpose(F.matmul(weights, v), (0, 2, 1, 3))
    out = F.linear(F.reshape(out, (n, t, d)), params['proj.weight'],
                   params['proj.bias'])
    if return_weights:
        return out, weights
    return out


def encoder_block(x, params, cfg):
    """Pre-norm block: x + MHSA(LN(x)), then x + MLP(LN(x))."""
    eps = cfg.layer_norm_eps
    h = F.layer_norm(x, params['norm1.gamma'], params['norm1.beta'], eps)
    x = F.add(x, multi_head_attention(h, params.scope('attn'),
                                      cfg.num_heads))
    h = F.layer_norm(x, params['norm2.gamma'], params['norm2.beta'], eps)
    h = F.gelu(F.linear(h, params['mlp.fc1.weight'], params['mlp.fc1.bias']))
    h = F.linear(h, params['mlp.fc2.weight'], params['mlp.fc2.bias'])
    return F.add(x, h)


def deit_forward(image, cfg, params):
    """Encode [N, C, H, W] images to [N, D] class-token features."""
    if image.ndim == 4 and tuple(image.shape[2:]) != (cfg.image_h,
                                                      cfg.image_w):
        raise exceptions.ShapeError(
            _('Backbone expects %(h)dx%(w)d images') %
            {'h': cfg.image_h, 'w': cfg.image_w}, image.shape)
    patches = patch_embed(image, cfg, params)
    n, d = patches.shape[0], cfg.embed_dim
    tokens = F.concat([F.expand(params['cls_token'], (n, 1, d)),
                       F.expand(params['dist_token'], (n, 1, d)),
                       patches], axis=1)
    x = F.add(tokens, params['pos_embed'])
    for i in range(cfg.depth):
        x = encoder_block(x, params.scope('block%d' % i), cfg)
    x = F.layer_norm(x, params['norm.gamma'], params['norm.beta'],
                     cfg.layer_norm_eps)
    return F.slice_(x, (slice(None), 0))
