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

import unittest

import numpy as np
from numpy import testing as npt

from ewastenet.common import exceptions
from ewastenet import deit
from ewastenet import functional as F
from ewastenet import gradcheck
from ewastenet import parameters
from ewastenet.tensor import Tensor


TOY = deit.DeiTConfig(patch_size=8, embed_dim=16, depth=1, num_heads=2,
                      image_h=16, image_w=16)


def _backbone(cfg=TOY, seed=0):
    params = parameters.ModelParameters()
    deit.init_backbone(params, cfg, np.random.default_rng(seed), 'net')
    return params


def _images(n, cfg=TOY, seed=1):
    return Tensor(np.random.default_rng(seed).normal(
        size=(n, cfg.input_channels, cfg.image_h, cfg.image_w)))


class TestConfig(unittest.TestCase):
    def test_defaults(self):
        cfg = deit.DeiTConfig().validate()
        self.assertEqual(64, cfg.num_patches)
        self.assertEqual(66, cfg.num_tokens)
        self.assertEqual(256, cfg.hidden_dim)

    def test_indivisible_image(self):
        with self.assertRaises(exceptions.ConfigError) as ctx:
            deit.DeiTConfig(image_h=60).validate()
        self.assertIn('patch size 8', str(ctx.exception))

    def test_indivisible_heads(self):
        self.assertRaises(exceptions.ConfigError,
                          deit.DeiTConfig(embed_dim=30).validate)

    def test_non_positive(self):
        self.assertRaises(exceptions.ConfigError,
                          deit.DeiTConfig(depth=0).validate)

    def test_from_dict(self):
        self.assertEqual(deit.DeiTConfig(depth=2),
                         deit.DeiTConfig.from_dict({'depth': 2}))
        self.assertRaises(exceptions.ConfigError, deit.DeiTConfig.from_dict,
                          {'width': 2})


class TestParameterCount(unittest.TestCase):
    def test_default(self):
        cfg = deit.DeiTConfig()
        params = _backbone(cfg)
        self.assertEqual(216768, deit.backbone_parameter_count(cfg))
        self.assertEqual((216768, 0), params.count())

    def test_depth_proportional(self):
        counts = [deit.backbone_parameter_count(deit.DeiTConfig(depth=d))
                  for d in (1, 2, 4)]
        block = counts[1] - counts[0]
        self.assertEqual(2 * block, counts[2] - counts[1])
        self.assertGreater(block, 0)

    def test_names(self):
        params = _backbone()
        for name in ('net.patch_embed.weight', 'net.cls_token',
                     'net.dist_token', 'net.pos_embed',
                     'net.block0.attn.qkv.weight', 'net.block0.mlp.fc2.bias',
                     'net.norm.gamma'):
            self.assertIn(name, params)
        self.assertEqual((1, 6, 16), params['net.pos_embed'].shape)
        self.assertEqual((16, 48), params['net.block0.attn.qkv.weight'].shape)

    def test_token_init(self):
        cfg = deit.DeiTConfig()
        params = _backbone(cfg)
        pos = params['net.pos_embed'].data
        self.assertLessEqual(np.abs(pos).max(), 2 * deit.TOKEN_INIT_STD)
        self.assertAlmostEqual(deit.TOKEN_INIT_STD, float(pos.std()),
                               delta=0.005)
        npt.assert_array_equal(0.0, params['net.patch_embed.bias'].data)
        npt.assert_array_equal(1.0, params['net.norm.gamma'].data)


class TestPatchEmbed(unittest.TestCase):
    def test_token_counts(self):
        for size, patch, expected in ((64, 8, 64), (384, 16, 576)):
            cfg = deit.DeiTConfig(patch_size=patch, embed_dim=8, num_heads=2,
                                  depth=1, image_h=size, image_w=size)
            params = _backbone(cfg).scope('net')
            out = deit.patch_embed(_images(1, cfg), cfg, params)
            self.assertEqual((1, expected, 8), out.shape)

    def test_zero_image(self):
        params = _backbone().scope('net')
        out = deit.patch_embed(Tensor(np.zeros((2, 3, 16, 16))), TOY, params)
        npt.assert_array_equal(0.0, out.data)

    def test_patch_order(self):
        params = _backbone().scope('net')
        image = np.zeros((1, 3, 16, 16))
        image[0, :, 8:, :8] = 1.0
        out = deit.patch_embed(Tensor(image), TOY, params).data[0]
        # Row-major patches: only patch 2 (second row, first column) lit
        self.assertTrue(np.any(out[2] != 0))
        npt.assert_array_equal(0.0, out[[0, 1, 3]])

    def test_indivisible(self):
        params = _backbone().scope('net')
        self.assertRaises(exceptions.ShapeError, deit.patch_embed,
                          Tensor(np.zeros((1, 3, 12, 16))), TOY, params)

    def test_channel_mismatch(self):
        params = _backbone().scope('net')
        self.assertRaises(exceptions.ShapeError, deit.patch_embed,
                          Tensor(np.zeros((1, 2, 16, 16))), TOY, params)


class TestAttention(unittest.TestCase):
    def setUp(self):
        super(TestAttention, self).setUp()
        self.params = _backbone().scope('net.block0.attn')

    def test_single_token(self):
        x = np.random.default_rng(0).normal(size=(2, 1, 16))
        out = deit.multi_head_attention(Tensor(x), self.params, 2).data
        qkv_w = self.params['qkv.weight'].data
        qkv_b = self.params['qkv.bias'].data
        value = x @ qkv_w[:, 32:] + qkv_b[32:]
        expected = (value @ self.params['proj.weight'].data +
                    self.params['proj.bias'].data)
        npt.assert_allclose(expected, out, rtol=1e-4, atol=1e-5)

    def test_rows_sum_to_one(self):
        x = Tensor(np.random.default_rng(1).normal(size=(3, 7, 16)))
        out, weights = deit.multi_head_attention(x, self.params, 2,
                                                 return_weights=True)
        self.assertEqual((3, 7, 16), out.shape)
        self.assertEqual((3, 2, 7, 7), weights.shape)
        npt.assert_allclose(1.0, weights.data.sum(axis=-1), atol=1e-6)
        self.assertTrue(np.all(weights.data >= 0))

    def test_permutation_equivariance(self):
        x = np.random.default_rng(2).normal(size=(1, 5, 16))
        perm = np.array([3, 0, 4, 1, 2])
        out = deit.multi_head_attention(Tensor(x), self.params, 2).data
        permuted = deit.multi_head_attention(Tensor(x[:, perm]),
                                             self.params, 2).data
        npt.assert_allclose(out[:, perm], permuted, rtol=1e-4, atol=1e-5)

    def test_heads_must_divide(self):
        self.assertRaises(exceptions.ShapeError, deit.multi_head_attention,
                          Tensor(np.zeros((1, 2, 16))), self.params, 3)


class TestEncoderBlock(unittest.TestCase):
    def test_zero_weights_identity(self):
        params = _backbone()
        for name, t in params.items():
            if '.block0.' in name and ('attn' in name or 'mlp' in name):
                t.data[...] = 0.0
        x = np.random.default_rng(0).normal(size=(2, 6, 16))
        out = deit.encoder_block(Tensor(x), params.scope('net.block0'), TOY)
        npt.assert_array_equal(x.astype(np.float32), out.data)

    def test_shape(self):
        x = Tensor(np.ones((2, 6, 16)))
        out = deit.encoder_block(x, _backbone().scope('net.block0'), TOY)
        self.assertEqual(x.shape, out.shape)

    def test_gradcheck(self):
        params = _backbone().astype(np.float64)
        names = [name for name, _t in params.items() if '.block0.' in name]
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(size=(2, 6, 16)))
        weights = Tensor(rng.normal(size=(2, 6, 16)))

        def f(x, *leaves):
            scope = params.with_tensors(dict(zip(names, leaves))).scope(
                'net.block0')
            return F.sum_(F.mul(deit.encoder_block(x, scope, TOY), weights))
        error = gradcheck.finite_diff_check(
            f, [x] + [params[n] for n in names], num_coords=150, rng=rng)
        self.assertLess(error, 1e-3)


class TestForward(unittest.TestCase):
    def test_shape_and_determinism(self):
        params = _backbone().scope('net')
        image = _images(1).data
        batch = Tensor(np.concatenate([image, image]))
        out = deit.deit_forward(batch, TOY, params)
        self.assertEqual((2, 16), out.shape)
        npt.assert_array_equal(out.data[0], out.data[1])
        npt.assert_array_equal(out.data,
                               deit.deit_forward(batch, TOY, params).data)

    def test_wrong_size(self):
        params = _backbone().scope('net')
        self.assertRaises(exceptions.ShapeError, deit.deit_forward,
                          Tensor(np.zeros((1, 3, 24, 24))), TOY, params)

    def test_gradcheck(self):
        params = _backbone().astype(np.float64)
        names = list(params)
        labels = np.array([0, 3])
        head = Tensor(np.random.default_rng(5).normal(size=(16, 4)))

        def f(image, *leaves):
            scope = params.with_tensors(dict(zip(names, leaves))).scope(
                'net')
            feature = deit.deit_forward(image, TOY, scope)
            return F.cross_entropy(F.matmul(feature, head), labels)
        error = gradcheck.finite_diff_check(
            f, [_images(2)] + [params[n] for n in names], num_coords=200,
            rng=np.random.default_rng(6))
        self.assertLess(error, 1e-3)
