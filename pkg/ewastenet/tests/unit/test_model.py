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
from scipy import special

from ewastenet.common import exceptions
from ewastenet import deit
from ewastenet import functional as F
from ewastenet import gradcheck
from ewastenet import model
from ewastenet import tensor
from ewastenet.tensor import Tensor


BACKBONE_COUNT = 216768


def _toy(seed=0):
    return model.build_model(model.toy_config(), seed=seed)


def _images(n, size=16, seed=1):
    return np.random.default_rng(seed).normal(size=(n, 3, size, size))


class TestSobel(unittest.TestCase):
    def test_kernels(self):
        bank = model.sobel_kernel()
        self.assertEqual((2, 1, 3, 3), bank.shape)
        npt.assert_array_equal(bank[0, 0].T, bank[1, 0])
        self.assertEqual(0.0, bank[0, 0].sum())
        self.assertEqual((1, 1, 3, 3), model.sobel_kernel('gx_only').shape)
        self.assertRaises(ValueError, model.sobel_kernel, 'laplace')

    def test_constant_image(self):
        out = model.sobel_apply(Tensor(np.full((2, 1, 5, 7), 3.5)))
        self.assertEqual((2, 2, 5, 7), out.shape)
        npt.assert_array_equal(0.0, out.data)

    def test_column_step(self):
        image = np.array([[0.0, 0.0, 1.0]] * 3).reshape(1, 1, 3, 3)
        out = model.sobel_apply(Tensor(image)).data
        self.assertEqual(4.0, out[0, 0, 1, 1])
        self.assertEqual(0.0, out[0, 1, 1, 1])

    def test_negation(self):
        image = np.random.default_rng(0).normal(size=(1, 1, 6, 6))
        out = model.sobel_apply(Tensor(image)).data
        npt.assert_array_equal(-out, model.sobel_apply(Tensor(-image)).data)

    def test_linear(self):
        rng = np.random.default_rng(1)
        x, y = rng.normal(size=(2, 2, 1, 8, 8))
        with tensor.precision(np.float64):
            combined = model.sobel_apply(Tensor(2.5 * x - 1.5 * y)).data
            separate = (2.5 * model.sobel_apply(Tensor(x)).data -
                        1.5 * model.sobel_apply(Tensor(y)).data)
        npt.assert_allclose(separate, combined, atol=1e-5)

    def test_multi_channel(self):
        self.assertRaises(exceptions.ShapeError, model.sobel_apply,
                          Tensor(np.zeros((1, 3, 4, 4))))

    def test_frozen_kernel(self):
        kernel = Tensor(model.sobel_kernel())
        image = Tensor(_images(1)[:, :1], requires_grad=True)
        tensor.backward(F.sum_(model.sobel_apply(image, kernel)))
        self.assertIsNone(kernel.grad)
        self.assertEqual(image.shape, image.grad.shape)


class TestEdgeStream(unittest.TestCase):
    def test_shape(self):
        net = _toy()
        out = model.edge_stream_forward(Tensor(_images(2)), net.params,
                                        net.cfg)
        self.assertEqual((2, 16), out.shape)

    def test_constant_images(self):
        net = _toy()
        out = model.edge_stream_forward(
            Tensor(np.stack([np.full((3, 16, 16), -0.5),
                             np.full((3, 16, 16), 2.0)])),
            net.params, net.cfg).data
        npt.assert_array_equal(out[0], out[1])

    def test_gx_only(self):
        cfg = model.toy_config()
        cfg.sobel_mode = 'gx_only'
        net = model.build_model(cfg)
        self.assertEqual((1, 1, 3, 3), net.params['edge.sobel.kernel'].shape)
        self.assertEqual((3, 1, 3, 3),
                         net.params['edge.adapter.weight'].shape)
        out = model.edge_stream_forward(Tensor(_images(1)), net.params, cfg)
        self.assertEqual((1, 16), out.shape)

    def test_gradcheck(self):
        net = _toy()
        params = net.params.astype(np.float64)
        names = [name for name, _t in params.trainable()
                 if name.startswith('edge.')]
        rng = np.random.default_rng(2)
        weights = Tensor(rng.normal(size=(2, 16)))

        def f(image, *leaves):
            scope = params.with_tensors(dict(zip(names, leaves)))
            out = model.edge_stream_forward(image, scope, net.cfg)
            return F.sum_(F.mul(out, weights))
        error = gradcheck.finite_diff_check(
            f, [Tensor(_images(2))] + [params[n] for n in names],
            eps=1e-5, num_coords=150, rng=rng)
        self.assertLess(error, 1e-3)


class TestASPP(unittest.TestCase):
    def setUp(self):
        super(TestASPP, self).setUp()
        self.net = model.build_model()
        self.params = self.net.params.scope('pyramid.aspp')
        self.cfg = self.net.cfg.aspp

    def test_shape(self):
        out = model.aspp_forward(Tensor(_images(2, size=12)), self.params,
                                 self.cfg)
        self.assertEqual((2, 124, 12, 12), out.shape)
        self.assertEqual(124, self.cfg.out_channels)

    def test_zero_input(self):
        out = model.aspp_forward(Tensor(np.zeros((1, 3, 12, 12))),
                                 self.params, self.cfg)
        npt.assert_array_equal(0.0, out.data)

    def test_branch_ablation(self):
        image = Tensor(_images(1, size=12))
        base = model.aspp_forward(image, self.params, self.cfg).data
        bounds = np.cumsum((0,) + self.cfg.branch_filters)
        for k in range(len(self.cfg.branch_filters)):
            weight = self.params['branch%d.weight' % k]
            saved = weight.data.copy()
            weight.data[...] = 0.0
            try:
                out = model.aspp_forward(image, self.params, self.cfg).data
            finally:
                weight.data[...] = saved
            start, stop = bounds[k], bounds[k + 1]
            npt.assert_array_equal(0.0, out[:, start:stop])
            npt.assert_array_equal(np.delete(base, np.s_[start:stop], 1),
                                   np.delete(out, np.s_[start:stop], 1))

    def test_channel_mismatch(self):
        self.assertRaises(exceptions.ShapeError, model.aspp_forward,
                          Tensor(np.zeros((1, 4, 12, 12))), self.params,
                          self.cfg)


class TestCBAM(unittest.TestCase):
    def setUp(self):
        super(TestCBAM, self).setUp()
        self.net = _toy()
        self.params = self.net.params.scope('pyramid.cbam')
        self.x = Tensor(np.random.default_rng(3).normal(size=(2, 10, 4, 4)))

    def test_gates(self):
        out, spatial, channel = model.cbam_forward(
            self.x, self.params, self.net.cfg.cbam, return_gates=True)
        self.assertEqual(self.x.shape, out.shape)
        self.assertEqual((2, 1, 4, 4), spatial.shape)
        self.assertEqual((2, 10, 1, 1), channel.shape)
        for gate in (spatial.data, channel.data):
            self.assertTrue(np.all(gate > 0))
            self.assertTrue(np.all(gate < 1))

    def test_composition(self):
        for order in model.CBAM_ORDERS:
            cfg = model.CBAMConfig(channel_reduction=2, order=order)
            out, spatial, channel = model.cbam_forward(
                self.x, self.params, cfg, return_gates=True)
            expected = (self.x.data * spatial.data) * channel.data \
                if order == 'spatial_first' \
                else (self.x.data * channel.data) * spatial.data
            npt.assert_array_equal(expected, out.data)

    def test_orders_differ(self):
        first = model.cbam_forward(self.x, self.params,
                                   model.CBAMConfig(channel_reduction=2))
        second = model.cbam_forward(
            self.x, self.params,
            model.CBAMConfig(channel_reduction=2, order='channel_first'))
        self.assertFalse(np.array_equal(first.data, second.data))

    def test_saturation(self):
        for name in ('spatial.weight', 'channel.fc2.weight'):
            self.params[name].data[...] = 0.0
        for name in ('spatial.bias', 'channel.fc2.bias'):
            self.params[name].data[...] = 50.0
        out = model.cbam_forward(self.x, self.params, self.net.cfg.cbam)
        npt.assert_array_equal(self.x.data, out.data)

    def test_indivisible(self):
        self.assertRaises(exceptions.ShapeError, model.cbam_forward,
                          Tensor(np.zeros((1, 9, 4, 4))), self.params,
                          self.net.cfg.cbam)


class TestPyramidStream(unittest.TestCase):
    def test_shape_and_determinism(self):
        net = _toy()
        images = Tensor(_images(2))
        out = model.pyramid_stream_forward(images, net.params, net.cfg)
        self.assertEqual((2, 16), out.shape)
        npt.assert_array_equal(
            out.data,
            model.pyramid_stream_forward(images, net.params, net.cfg).data)

    def test_gradcheck(self):
        net = _toy()
        params = net.params.astype(np.float64)
        names = [name for name, _t in params.trainable()
                 if name.startswith('pyramid.')]
        rng = np.random.default_rng(4)
        weights = Tensor(rng.normal(size=(2, 16)))

        def f(image, *leaves):
            scope = params.with_tensors(dict(zip(names, leaves)))
            out = model.pyramid_stream_forward(image, scope, net.cfg)
            return F.sum_(F.mul(out, weights))
        error = gradcheck.finite_diff_check(
            f, [Tensor(_images(2))] + [params[n] for n in names],
            eps=1e-5, num_coords=200, rng=rng, skip_nonsmooth=True,
            kink_tol=0.1, min_checked=100)
        self.assertLess(error, 1e-3)


class TestFusionHead(unittest.TestCase):
    def setUp(self):
        super(TestFusionHead, self).setUp()
        self.net = _toy()
        self.params = self.net.params.scope('head')
        self.cfg = self.net.cfg.fusion
        rng = np.random.default_rng(5)
        self.f1 = Tensor(rng.normal(size=(4, 16)))
        self.f2 = Tensor(rng.normal(size=(4, 16)))

    def test_probabilities(self):
        probs = model.fusion_head_forward(self.f1, self.f2, self.params,
                                          self.cfg).data
        self.assertEqual((4, 8), probs.shape)
        npt.assert_allclose(1.0, probs.sum(axis=1), atol=1e-6)
        self.assertTrue(np.all(probs > 0))
        self.assertTrue(np.all(probs < 1))

    def test_inference_deterministic(self):
        first = model.fusion_head_forward(self.f1, self.f2, self.params,
                                          self.cfg)
        second = model.fusion_head_forward(self.f1, self.f2, self.params,
                                           self.cfg)
        npt.assert_array_equal(first.data, second.data)

    def test_training_uses_dropout(self):
        rng = np.random.default_rng(0)
        train = model.fusion_logits(self.f1, self.f2, self.params, self.cfg,
                                    training=True, rng=rng)
        infer = model.fusion_logits(self.f1, self.f2, self.params, self.cfg)
        self.assertFalse(np.array_equal(train.data, infer.data))

    def test_constant_function(self):
        for i in range(len(self.cfg.layer_sizes)):
            self.params['fc%d.weight' % i].data[...] = 0.0
            self.params['fc%d.bias' % i].data[...] = 0.0
        bias = np.linspace(-1.0, 2.0, 8)
        self.params['classifier.bias'].data[...] = bias
        probs = model.fusion_head_forward(self.f1, self.f2, self.params,
                                          self.cfg).data
        for row in probs:
            npt.assert_allclose(special.softmax(bias), row, rtol=1e-5)

    def test_feature_mismatch(self):
        self.assertRaises(exceptions.ShapeError, model.fusion_head_forward,
                          self.f1, Tensor(np.zeros((4, 8))), self.params,
                          self.cfg)


class TestConfig(unittest.TestCase):
    def test_defaults(self):
        cfg = model.EWasteNetConfig().validate()
        self.assertEqual(124, cfg.aspp.out_channels)
        self.assertEqual(2, cfg.sobel_channels)

    def test_reduction_must_divide(self):
        cfg = model.EWasteNetConfig(
            cbam=model.CBAMConfig(channel_reduction=8))
        with self.assertRaises(exceptions.ConfigError) as ctx:
            model.build_model(cfg)
        self.assertIn('124', str(ctx.exception))

    def test_backbone_size_mismatch(self):
        cfg = model.EWasteNetConfig(image_h=32, image_w=32)
        self.assertRaises(exceptions.ConfigError, cfg.validate)

    def test_invalid_sections(self):
        for cfg in (model.EWasteNetConfig(sobel_mode='canny'),
                    model.EWasteNetConfig(aspp=model.ASPPConfig(
                        branch_dilations=(1, 2))),
                    model.EWasteNetConfig(cbam=model.CBAMConfig(
                        spatial_kernel=4)),
                    model.EWasteNetConfig(fusion=model.FusionMLPConfig(
                        dropout_rates=(1.0,)))):
            self.assertRaises(exceptions.ConfigError, cfg.validate)

    def test_dict_round_trip(self):
        cfg = model.toy_config()
        data = cfg.to_dict()
        self.assertEqual([4, 2, 2, 1, 1], data['aspp']['branch_filters'])
        self.assertEqual(cfg, model.EWasteNetConfig.from_dict(data))

    def test_from_dict_image_size(self):
        cfg = model.EWasteNetConfig.from_dict({'image_h': 32,
                                               'image_w': 32})
        self.assertEqual((32, 32), (cfg.backbone.image_h,
                                    cfg.backbone.image_w))
        cfg.validate()

    def test_from_dict_unknown_key(self):
        with self.assertRaises(exceptions.ConfigError) as ctx:
            model.EWasteNetConfig.from_dict({'cbam': {'ratio': 4}})
        self.assertIn('model.cbam', str(ctx.exception))


class TestBuildModel(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.net = model.build_model()

    def test_forward(self):
        probs = self.net(Tensor(_images(2, size=64)))
        self.assertEqual((2, 8), probs.shape)
        npt.assert_allclose(1.0, probs.data.sum(axis=1), atol=1e-6)

    def test_predict(self):
        probs = self.net.predict(Tensor(_images(1, size=64)))
        self.assertIsInstance(probs, np.ndarray)
        self.assertEqual((1, 8), probs.shape)

    def test_same_seed(self):
        other = model.build_model(seed=0).params.snapshot()
        for name, value in self.net.params.snapshot().items():
            npt.assert_array_equal(value, other[name], name)

    def test_different_seed(self):
        other = model.build_model(seed=1).params
        self.assertFalse(np.array_equal(
            self.net.params['head.fc0.weight'].data,
            other['head.fc0.weight'].data))

    def test_names(self):
        for name in ('edge.sobel.kernel', 'edge.adapter.weight',
                     'edge.deit.block0.attn.qkv.weight',
                     'pyramid.aspp.branch4.weight',
                     'pyramid.cbam.channel.fc1.weight',
                     'pyramid.cbam.spatial.weight',
                     'pyramid.adapter.weight',
                     'pyramid.deit.block3.mlp.fc2.bias',
                     'head.fc2.weight', 'head.classifier.bias'):
            self.assertIn(name, self.net.params)
        self.assertEqual((124, 31),
                         self.net.params['pyramid.cbam.channel.fc1.weight']
                         .shape)

    def test_parameter_budget(self):
        trainable, frozen = self.net.count_trainable_parameters()
        self.assertEqual(713582, trainable)
        self.assertEqual(18, frozen)
        self.assertLess(trainable, model.PARAMETER_BUDGET)

    def test_parameter_table(self):
        analytic = model.analytic_parameter_count(self.net.cfg)
        table = model.parameter_table(self.net.params)
        self.assertEqual(list(model.GROUPS), [row[0] for row in table])
        for group, trainable, frozen in table:
            self.assertEqual(analytic[group], trainable + frozen, group)
        self.assertEqual(('edge.sobel', 0, 18), table[0])
        self.assertEqual(('edge.adapter', 57, 0), table[1])
        self.assertEqual(BACKBONE_COUNT, analytic['edge.deit'])
        self.assertEqual(3472, analytic['pyramid.aspp'])
        self.assertEqual(7942, analytic['pyramid.cbam'])
        self.assertEqual(3351, analytic['pyramid.adapter'])
        self.assertEqual(265224, analytic['head'])


class TestFreezing(unittest.TestCase):
    def test_freeze_backbones(self):
        net = _toy()
        before, _frozen = net.count_trainable_parameters()
        backbone = deit.backbone_parameter_count(net.cfg.backbone)
        model.freeze_backbones(net.params)
        after, frozen = net.count_trainable_parameters()
        self.assertEqual(2 * backbone, before - after)
        self.assertEqual(2 * backbone + 18, frozen)
        self.assertTrue(net.params.is_frozen('edge.deit.pos_embed'))
        model.freeze_backbones(net.params, frozen=False)
        self.assertEqual(before, net.count_trainable_parameters()[0])
        self.assertTrue(net.params.is_frozen('edge.sobel.kernel'))

    def test_frozen_tensors_get_no_gradient(self):
        net = _toy()
        model.freeze_backbones(net.params)
        loss = net.loss(Tensor(_images(2)), np.array([0, 7]))
        tensor.backward(loss)
        self.assertIsNone(net.params['edge.deit.cls_token'].grad)
        self.assertIsNone(net.params['edge.sobel.kernel'].grad)
        self.assertIsNotNone(net.params['edge.adapter.weight'].grad)
        self.assertIsNotNone(net.params['head.classifier.weight'].grad)


class TestEndToEnd(unittest.TestCase):
    def test_loss(self):
        net = _toy()
        loss = net.loss(Tensor(_images(4)), np.array([0, 1, 2, 3]))
        self.assertEqual((), loss.shape)
        self.assertTrue(np.isfinite(loss.item()))

    def test_gradcheck(self):
        net = _toy()
        params = net.params.astype(np.float64)
        names = [name for name, _t in params.trainable()]
        labels = np.array([1, 5])
        with tensor.precision(np.float64):
            images = Tensor(_images(2))

        def f(*leaves):
            replaced = params.with_tensors(dict(zip(names, leaves)))
            return net.with_params(replaced).loss(images, labels)
        error = gradcheck.finite_diff_check(
            f, [params[n] for n in names], eps=1e-5, num_coords=300,
            rng=np.random.default_rng(7), skip_nonsmooth=True,
            kink_tol=0.1, min_checked=200)
        self.assertLess(error, 1e-3)
